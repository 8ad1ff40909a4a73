//! Dense row-major tensors with f32 and f64 storage.
//!
//! The crate trains in f32 by default and runs numerical tests in f64, so
//! every kernel exists for both dtypes. Mixed-dtype arithmetic is an error
//! rather than an implicit promotion: silent upcasts would make the f32
//! training path quietly drift into f64 and break byte-exact reproducibility
//! of checkpoints.
//!
//! Shapes are explicit. Elementwise ops require identical shapes; the only
//! shape-changing ops are the dedicated reshape/broadcast/reduce kernels,
//! which the autodiff layer pairs up as forward/backward duals.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Size of one element in bytes.
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Backing storage; one flat buffer per dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense row-major tensor. Rank 0 (scalar) through rank 2 are used by the
/// models in this crate; the layout generalizes to higher ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    // ---- constructors -----------------------------------------------------

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(Error::BadShape {
                op: "from_f32",
                shape,
                detail: format!("buffer has {} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(Error::BadShape {
                op: "from_f64",
                shape,
                detail: format!("buffer has {} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: TensorData::F64(data),
        })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(dtype: Dtype, v: f64) -> Tensor {
        Tensor::full(dtype, vec![], v)
    }

    pub fn zeros(dtype: Dtype, shape: Vec<usize>) -> Tensor {
        Tensor::full(dtype, shape, 0.0)
    }

    pub fn full(dtype: Dtype, shape: Vec<usize>, v: f64) -> Tensor {
        let n = numel_of(&shape);
        let data = match dtype {
            Dtype::F32 => TensorData::F32(vec![v as f32; n]),
            Dtype::F64 => TensorData::F64(vec![v; n]),
        };
        Tensor { shape, data }
    }

    /// 1-D tensor from f64 values, stored at the requested dtype.
    pub fn vector(dtype: Dtype, values: &[f64]) -> Tensor {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.iter().map(|&v| v as f32).collect()),
            Dtype::F64 => TensorData::F64(values.to_vec()),
        };
        Tensor {
            shape: vec![values.len()],
            data,
        }
    }

    // ---- inspectors -------------------------------------------------------

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.shape)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a rank-0 tensor, widened to f64.
    pub fn scalar_f64(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::BadShape {
                op: "scalar_f64",
                shape: self.shape.clone(),
                detail: "expected rank 0".into(),
            });
        }
        Ok(self.get_f64(0))
    }

    /// Element at a flat (row-major) index, widened to f64. Panics if out of
    /// bounds; callers index within `numel()`.
    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    /// All elements widened to f64 in row-major order.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Same values at the requested dtype. Returns a clone when the dtype
    /// already matches.
    pub fn cast(&self, dtype: Dtype) -> Tensor {
        match (dtype, &self.data) {
            (Dtype::F32, TensorData::F32(_)) | (Dtype::F64, TensorData::F64(_)) => self.clone(),
            (Dtype::F32, TensorData::F64(v)) => Tensor {
                shape: self.shape.clone(),
                data: TensorData::F32(v.iter().map(|&x| x as f32).collect()),
            },
            (Dtype::F64, TensorData::F32(v)) => Tensor {
                shape: self.shape.clone(),
                data: TensorData::F64(v.iter().map(|&x| x as f64).collect()),
            },
        }
    }

    // ---- raw bytes (checkpoint and matrix formats) -------------------------

    /// Element buffer serialized little-endian in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Inverse of [`Tensor::to_le_bytes`]; `bytes` must be exactly
    /// `numel * dtype.size_bytes()` long.
    pub fn from_le_bytes(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let n = numel_of(&shape);
        let want = n * dtype.size_bytes();
        if bytes.len() != want {
            return Err(Error::BadShape {
                op: "from_le_bytes",
                shape,
                detail: format!("expected {want} bytes, got {}", bytes.len()),
            });
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f32k: impl Fn(f32, f32) -> f32,
        f64k: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = match (&self.data, &rhs.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                TensorData::F32(a.iter().zip(b).map(|(&x, &y)| f32k(x, y)).collect())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                TensorData::F64(a.iter().zip(b).map(|(&x, &y)| f64k(x, y)).collect())
            }
            _ => {
                return Err(Error::DtypeMismatch {
                    op,
                    lhs: self.dtype(),
                    rhs: rhs.dtype(),
                })
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn unary(&self, f32k: impl Fn(f32) -> f32, f64k: impl Fn(f64) -> f64) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(v.iter().map(|&x| f32k(x)).collect()),
            TensorData::F64(v) => TensorData::F64(v.iter().map(|&x| f64k(x)).collect()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "div", |a, b| a / b, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |x| -x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x| x.max(0.0))
    }

    /// Heaviside step: 1 where x > 0, else 0. The exact derivative mask that
    /// pairs with [`Tensor::relu`].
    pub fn step(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { 1.0 } else { 0.0 },
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f32::tanh, f64::tanh)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f32::exp, f64::exp)
    }

    /// Natural log. Non-positive inputs are a domain error rather than a
    /// silent -inf/NaN.
    pub fn log(&self) -> Result<Tensor> {
        let bad = match &self.data {
            TensorData::F32(v) => v.iter().position(|&x| x <= 0.0).map(|i| (i, v[i] as f64)),
            TensorData::F64(v) => v.iter().position(|&x| !(x > 0.0)).map(|i| (i, v[i])),
        };
        if let Some((i, x)) = bad {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x} at index {i}"),
            });
        }
        Ok(self.unary(f32::ln, f64::ln))
    }

    /// Square root. Negative inputs are a domain error.
    pub fn sqrt(&self) -> Result<Tensor> {
        let bad = match &self.data {
            TensorData::F32(v) => v.iter().position(|&x| x < 0.0).map(|i| (i, v[i] as f64)),
            TensorData::F64(v) => v.iter().position(|&x| x < 0.0).map(|i| (i, v[i])),
        };
        if let Some((i, x)) = bad {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {x} at index {i}"),
            });
        }
        Ok(self.unary(f32::sqrt, f64::sqrt))
    }

    /// Signum with sign(0) = 0.
    pub fn sign(&self) -> Tensor {
        self.unary(
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Multiply every element by an f64 constant (narrowed for f32 data).
    pub fn scale(&self, c: f64) -> Tensor {
        let c32 = c as f32;
        self.unary(move |x| x * c32, move |x| x * c)
    }

    /// Add an f64 constant to every element (narrowed for f32 data).
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let c32 = c as f32;
        self.unary(move |x| x + c32, move |x| x + c)
    }

    // ---- linear algebra -----------------------------------------------------

    /// Matrix product of two rank-2 tensors, [m, k] x [k, n] -> [m, n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (&self.shape, &rhs.shape);
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::BadShape {
                op: "matmul",
                shape: if a_shape.len() != 2 {
                    a_shape.clone()
                } else {
                    b_shape.clone()
                },
                detail: "expected rank 2".into(),
            });
        }
        if a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.clone(),
                rhs: b_shape.clone(),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        fn kernel<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] = orow[j] + av * brow[j];
                    }
                }
            }
            out
        }
        let data = match (&self.data, &rhs.data) {
            (TensorData::F32(a), TensorData::F32(b)) => TensorData::F32(kernel(a, b, m, k, n)),
            (TensorData::F64(a), TensorData::F64(b)) => TensorData::F64(kernel(a, b, m, k, n)),
            _ => {
                return Err(Error::DtypeMismatch {
                    op: "matmul",
                    lhs: self.dtype(),
                    rhs: rhs.dtype(),
                })
            }
        };
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                shape: self.shape.clone(),
                detail: "expected rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        fn kernel<T: Copy>(v: &[T], r: usize, c: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(r * c);
            for j in 0..c {
                for i in 0..r {
                    out.push(v[i * c + j]);
                }
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v, r, c)),
            TensorData::F64(v) => TensorData::F64(kernel(v, r, c)),
        };
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                detail: format!("element count differs from {:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    // ---- reductions and broadcasts -----------------------------------------

    /// Sum of all elements as a rank-0 tensor. Accumulates in the storage
    /// dtype, left to right, so results are reproducible bit for bit.
    pub fn sum_all(&self) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(vec![v.iter().fold(0.0f32, |s, &x| s + x)]),
            TensorData::F64(v) => TensorData::F64(vec![v.iter().fold(0.0f64, |s, &x| s + x)]),
        };
        Tensor {
            shape: vec![],
            data,
        }
    }

    /// Repeat a rank-0 tensor into the given shape.
    pub fn broadcast_scalar(&self, shape: Vec<usize>) -> Result<Tensor> {
        if !self.is_scalar() {
            return Err(Error::BadShape {
                op: "broadcast_scalar",
                shape: self.shape.clone(),
                detail: "expected rank 0".into(),
            });
        }
        let n = numel_of(&shape);
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(vec![v[0]; n]),
            TensorData::F64(v) => TensorData::F64(vec![v[0]; n]),
        };
        Ok(Tensor { shape, data })
    }

    /// Sum a rank-2 tensor along `axis`, keeping the axis with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || axis > 1 {
            return Err(Error::BadShape {
                op: "sum_axis",
                shape: self.shape.clone(),
                detail: format!("expected rank 2 with axis 0 or 1, got axis {axis}"),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        fn kernel<T: Float>(v: &[T], r: usize, c: usize, axis: usize) -> (Vec<T>, Vec<usize>) {
            if axis == 0 {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] = out[j] + v[i * c + j];
                    }
                }
                (out, vec![1, c])
            } else {
                let mut out = vec![T::zero(); r];
                for i in 0..r {
                    for j in 0..c {
                        out[i] = out[i] + v[i * c + j];
                    }
                }
                (out, vec![r, 1])
            }
        }
        let (data, shape) = match &self.data {
            TensorData::F32(v) => {
                let (o, s) = kernel(v, r, c, axis);
                (TensorData::F32(o), s)
            }
            TensorData::F64(v) => {
                let (o, s) = kernel(v, r, c, axis);
                (TensorData::F64(o), s)
            }
        };
        Ok(Tensor { shape, data })
    }

    /// Repeat a rank-2 tensor whose `axis` has extent 1 up to extent `n`.
    /// The exact inverse direction of [`Tensor::sum_axis`].
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || axis > 1 || self.shape[axis] != 1 {
            return Err(Error::BadShape {
                op: "broadcast_axis",
                shape: self.shape.clone(),
                detail: format!("expected rank 2 with extent 1 on axis {axis}"),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        fn kernel<T: Copy>(v: &[T], r: usize, c: usize, axis: usize, n: usize) -> (Vec<T>, Vec<usize>) {
            if axis == 0 {
                // [1, c] -> [n, c]
                let mut out = Vec::with_capacity(n * c);
                for _ in 0..n {
                    out.extend_from_slice(v);
                }
                (out, vec![n, c])
            } else {
                // [r, 1] -> [r, n]
                let mut out = Vec::with_capacity(r * n);
                for i in 0..r {
                    for _ in 0..n {
                        out.push(v[i]);
                    }
                }
                (out, vec![r, n])
            }
        }
        let (data, shape) = match &self.data {
            TensorData::F32(v) => {
                let (o, s) = kernel(v, r, c, axis, n);
                (TensorData::F32(o), s)
            }
            TensorData::F64(v) => {
                let (o, s) = kernel(v, r, c, axis, n);
                (TensorData::F64(o), s)
            }
        };
        Ok(Tensor { shape, data })
    }

    // ---- gather / scatter ----------------------------------------------------

    /// Select rows of a rank-2 tensor; output has `indices.len()` rows.
    /// Indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                detail: "expected rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        fn kernel<T: Copy>(v: &[T], c: usize, indices: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v, c, indices)),
            TensorData::F64(v) => TensorData::F64(kernel(v, c, indices)),
        };
        Ok(Tensor {
            shape: vec![indices.len(), c],
            data,
        })
    }

    /// Adjoint of [`Tensor::gather_rows`]: accumulate the rows of `self`
    /// into a zero [rows, c] tensor at `indices` (repeats add).
    pub fn scatter_add_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[0] != indices.len() {
            return Err(Error::BadShape {
                op: "scatter_add_rows",
                shape: self.shape.clone(),
                detail: format!("expected [{}, _]", indices.len()),
            });
        }
        let c = self.shape[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfBounds {
                op: "scatter_add_rows",
                index: bad,
                len: rows,
            });
        }
        fn kernel<T: Float>(v: &[T], c: usize, indices: &[usize], rows: usize) -> Vec<T> {
            let mut out = vec![T::zero(); rows * c];
            for (src, &dst) in indices.iter().enumerate() {
                for j in 0..c {
                    out[dst * c + j] = out[dst * c + j] + v[src * c + j];
                }
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v, c, indices, rows)),
            TensorData::F64(v) => TensorData::F64(kernel(v, c, indices, rows)),
        };
        Ok(Tensor {
            shape: vec![rows, c],
            data,
        })
    }

    /// Select one element per coordinate pair from a rank-2 tensor into a
    /// 1-D tensor of length `coords.len()`.
    pub fn gather_elems(&self, coords: &[(usize, usize)]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "gather_elems",
                shape: self.shape.clone(),
                detail: "expected rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        for &(i, j) in coords {
            if i >= r {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_elems",
                    index: i,
                    len: r,
                });
            }
            if j >= c {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_elems",
                    index: j,
                    len: c,
                });
            }
        }
        fn kernel<T: Copy>(v: &[T], c: usize, coords: &[(usize, usize)]) -> Vec<T> {
            coords.iter().map(|&(i, j)| v[i * c + j]).collect()
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v, c, coords)),
            TensorData::F64(v) => TensorData::F64(kernel(v, c, coords)),
        };
        Ok(Tensor {
            shape: vec![coords.len()],
            data,
        })
    }

    /// Adjoint of [`Tensor::gather_elems`]: accumulate a 1-D tensor into a
    /// zero [rows, cols] tensor at `coords` (repeats add).
    pub fn scatter_add_elems(
        &self,
        coords: &[(usize, usize)],
        rows: usize,
        cols: usize,
    ) -> Result<Tensor> {
        if self.shape.len() != 1 || self.shape[0] != coords.len() {
            return Err(Error::BadShape {
                op: "scatter_add_elems",
                shape: self.shape.clone(),
                detail: format!("expected [{}]", coords.len()),
            });
        }
        for &(i, j) in coords {
            if i >= rows {
                return Err(Error::IndexOutOfBounds {
                    op: "scatter_add_elems",
                    index: i,
                    len: rows,
                });
            }
            if j >= cols {
                return Err(Error::IndexOutOfBounds {
                    op: "scatter_add_elems",
                    index: j,
                    len: cols,
                });
            }
        }
        fn kernel<T: Float>(v: &[T], coords: &[(usize, usize)], rows: usize, cols: usize) -> Vec<T> {
            let mut out = vec![T::zero(); rows * cols];
            for (s, &(i, j)) in coords.iter().enumerate() {
                out[i * cols + j] = out[i * cols + j] + v[s];
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v, coords, rows, cols)),
            TensorData::F64(v) => TensorData::F64(kernel(v, coords, rows, cols)),
        };
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    // ---- max reductions -------------------------------------------------------

    /// Max along `axis` of a rank-2 tensor, axis kept with extent 1.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || axis > 1 || self.shape[axis] == 0 {
            return Err(Error::BadShape {
                op: "max_axis",
                shape: self.shape.clone(),
                detail: format!("expected rank 2 with non-empty axis {axis}"),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        fn kernel<T: Float>(v: &[T], r: usize, c: usize, axis: usize) -> (Vec<T>, Vec<usize>) {
            if axis == 1 {
                let mut out = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &v[i * c..(i + 1) * c];
                    let mut m = row[0];
                    for &x in &row[1..] {
                        if x > m {
                            m = x;
                        }
                    }
                    out.push(m);
                }
                (out, vec![r, 1])
            } else {
                let mut out = v[..c].to_vec();
                for i in 1..r {
                    for j in 0..c {
                        if v[i * c + j] > out[j] {
                            out[j] = v[i * c + j];
                        }
                    }
                }
                (out, vec![1, c])
            }
        }
        let (data, shape) = match &self.data {
            TensorData::F32(v) => {
                let (o, s) = kernel(v, r, c, axis);
                (TensorData::F32(o), s)
            }
            TensorData::F64(v) => {
                let (o, s) = kernel(v, r, c, axis);
                (TensorData::F64(o), s)
            }
        };
        Ok(Tensor { shape, data })
    }

    /// Max of all elements of a non-empty 1-D tensor as a rank-0 tensor.
    pub fn max_all_1d(&self) -> Result<Tensor> {
        if self.shape.len() != 1 || self.shape[0] == 0 {
            return Err(Error::BadShape {
                op: "max_all_1d",
                shape: self.shape.clone(),
                detail: "expected non-empty rank 1".into(),
            });
        }
        fn kernel<T: Float>(v: &[T]) -> T {
            let mut m = v[0];
            for &x in &v[1..] {
                if x > m {
                    m = x;
                }
            }
            m
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(vec![kernel(v)]),
            TensorData::F64(v) => TensorData::F64(vec![kernel(v)]),
        };
        Ok(Tensor {
            shape: vec![],
            data,
        })
    }

    /// One-hot mask of the max along `axis` with ties broken toward the
    /// lowest index. Shapes match `self`; used as the (sub)gradient mask of
    /// the max reductions.
    pub fn argmax_mask_axis(&self, axis: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || axis > 1 || self.shape[axis] == 0 {
            return Err(Error::BadShape {
                op: "argmax_mask_axis",
                shape: self.shape.clone(),
                detail: format!("expected rank 2 with non-empty axis {axis}"),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        fn kernel<T: Float>(v: &[T], r: usize, c: usize, axis: usize) -> Vec<T> {
            let mut out = vec![T::zero(); r * c];
            if axis == 1 {
                for i in 0..r {
                    let row = &v[i * c..(i + 1) * c];
                    let mut best = 0;
                    for (j, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = j;
                        }
                    }
                    out[i * c + best] = T::one();
                }
            } else {
                for j in 0..c {
                    let mut best = 0;
                    for i in 1..r {
                        if v[i * c + j] > v[best * c + j] {
                            best = i;
                        }
                    }
                    out[best * c + j] = T::one();
                }
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v, r, c, axis)),
            TensorData::F64(v) => TensorData::F64(kernel(v, r, c, axis)),
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// One-hot mask of the max of a 1-D tensor, lowest index on ties.
    pub fn argmax_mask_1d(&self) -> Result<Tensor> {
        if self.shape.len() != 1 || self.shape[0] == 0 {
            return Err(Error::BadShape {
                op: "argmax_mask_1d",
                shape: self.shape.clone(),
                detail: "expected non-empty rank 1".into(),
            });
        }
        fn kernel<T: Float>(v: &[T]) -> Vec<T> {
            let mut best = 0;
            for (j, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = j;
                }
            }
            let mut out = vec![T::zero(); v.len()];
            out[best] = T::one();
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(kernel(v)),
            TensorData::F64(v) => TensorData::F64(kernel(v)),
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Row-wise argmax of a rank-2 tensor, lowest index on ties. Convenience
    /// for turning logits into predicted class labels.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 2 || self.shape[1] == 0 {
            return Err(Error::BadShape {
                op: "argmax_rows",
                shape: self.shape.clone(),
                detail: "expected rank 2 with non-empty rows".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let v = self.to_f64_vec();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}
