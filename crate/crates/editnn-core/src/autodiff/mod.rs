//! Reverse-mode automatic differentiation on an immutable expression graph.
//!
//! Every operation eagerly computes its value and records a node holding the
//! op tag and parent references, so [`backward::grad`] can walk the graph in
//! reverse. Adjoints are themselves built from these same ops, which means a
//! gradient is an ordinary differentiable expression: differentiating through
//! a multi-step unrolled optimizer (gradients of gradients) needs no special
//! machinery.
//!
//! Nodes are immutable and reference-counted. A [`Var`] is a cheap handle;
//! cloning shares the node. Graphs contain no interior mutability, so they
//! can be sent across threads freely, though the crate only ever parallelizes
//! across independent graphs.

pub mod backward;
pub mod check;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Operation tag. Parents are stored on the node; per-op metadata that the
/// backward pass needs (indices, axes) lives here.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// Identity on values, zero derivative. Keeps its parent for provenance.
    StopGradient,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    /// Heaviside step; derivative defined as zero (mask used by Relu backward).
    Step,
    Tanh,
    Exp,
    Log,
    Sqrt,
    /// Signum; derivative defined as zero everywhere.
    Sign,
    // The constant is carried for graph debugging; the backward pass never
    // reads it (d(x + c)/dx = 1).
    AddConst(#[allow(dead_code)] f64),
    ScaleConst(f64),
    Matmul,
    Transpose,
    Reshape,
    SumAll,
    BroadcastScalar,
    SumAxis(usize),
    BroadcastAxis(usize),
    GatherRows(Arc<Vec<usize>>),
    ScatterAddRows(Arc<Vec<usize>>),
    GatherElems(Arc<Vec<(usize, usize)>>),
    ScatterAddElems(Arc<Vec<(usize, usize)>>),
    MaxAxis(usize),
    MaxAll1d,
}

/// One vertex of the expression graph.
#[derive(Debug)]
pub struct Node {
    id: u64,
    op: Op,
    parents: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// Shared handle to a graph node. The public surface of the autodiff layer.
#[derive(Debug, Clone)]
pub struct Var(Arc<Node>);

impl Var {
    fn build(op: Op, parents: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            parents,
            value,
            requires_grad,
        }))
    }

    /// Differentiable input node.
    pub fn leaf(value: Tensor) -> Var {
        Var::build(Op::Leaf, vec![], value, true)
    }

    /// Non-differentiable input node.
    pub fn constant(value: Tensor) -> Var {
        Var::build(Op::Leaf, vec![], value, false)
    }

    /// Non-differentiable rank-0 node.
    pub fn scalar(dtype: Dtype, v: f64) -> Var {
        Var::constant(Tensor::scalar(dtype, v))
    }

    // ---- inspectors ---------------------------------------------------------

    /// The eagerly computed value of this node.
    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dtype(&self) -> Dtype {
        self.0.value.dtype()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    pub(crate) fn parents(&self) -> &[Var] {
        &self.0.parents
    }

    fn rg2(&self, rhs: &Var) -> bool {
        self.requires_grad() || rhs.requires_grad()
    }

    // ---- ops ------------------------------------------------------------------

    /// Identity on values; gradients do not flow through.
    pub fn stop_gradient(&self) -> Var {
        Var::build(
            Op::StopGradient,
            vec![self.clone()],
            self.value().clone(),
            false,
        )
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().add(rhs.value())?;
        Ok(Var::build(
            Op::Add,
            vec![self.clone(), rhs.clone()],
            value,
            self.rg2(rhs),
        ))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().sub(rhs.value())?;
        Ok(Var::build(
            Op::Sub,
            vec![self.clone(), rhs.clone()],
            value,
            self.rg2(rhs),
        ))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().mul(rhs.value())?;
        Ok(Var::build(
            Op::Mul,
            vec![self.clone(), rhs.clone()],
            value,
            self.rg2(rhs),
        ))
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().div(rhs.value())?;
        Ok(Var::build(
            Op::Div,
            vec![self.clone(), rhs.clone()],
            value,
            self.rg2(rhs),
        ))
    }

    pub fn neg(&self) -> Var {
        Var::build(
            Op::Neg,
            vec![self.clone()],
            self.value().neg(),
            self.requires_grad(),
        )
    }

    pub fn relu(&self) -> Var {
        Var::build(
            Op::Relu,
            vec![self.clone()],
            self.value().relu(),
            self.requires_grad(),
        )
    }

    /// 1 where the input is positive, else 0. Derivative is zero.
    pub fn step(&self) -> Var {
        Var::build(Op::Step, vec![self.clone()], self.value().step(), false)
    }

    pub fn tanh(&self) -> Var {
        Var::build(
            Op::Tanh,
            vec![self.clone()],
            self.value().tanh(),
            self.requires_grad(),
        )
    }

    pub fn exp(&self) -> Var {
        Var::build(
            Op::Exp,
            vec![self.clone()],
            self.value().exp(),
            self.requires_grad(),
        )
    }

    pub fn log(&self) -> Result<Var> {
        let value = self.value().log()?;
        Ok(Var::build(
            Op::Log,
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    pub fn sqrt(&self) -> Result<Var> {
        let value = self.value().sqrt()?;
        Ok(Var::build(
            Op::Sqrt,
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Signum. Derivative is defined as zero everywhere, so an update built
    /// from sign(g) passes gradients only through terms outside the sign.
    pub fn sign(&self) -> Var {
        Var::build(Op::Sign, vec![self.clone()], self.value().sign(), false)
    }

    pub fn add_const(&self, c: f64) -> Var {
        Var::build(
            Op::AddConst(c),
            vec![self.clone()],
            self.value().add_scalar(c),
            self.requires_grad(),
        )
    }

    pub fn scale_const(&self, c: f64) -> Var {
        Var::build(
            Op::ScaleConst(c),
            vec![self.clone()],
            self.value().scale(c),
            self.requires_grad(),
        )
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().matmul(rhs.value())?;
        Ok(Var::build(
            Op::Matmul,
            vec![self.clone(), rhs.clone()],
            value,
            self.rg2(rhs),
        ))
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = self.value().transpose()?;
        Ok(Var::build(
            Op::Transpose,
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Ok(Var::build(
            Op::Reshape,
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Sum of all elements as a rank-0 node.
    pub fn sum_all(&self) -> Var {
        Var::build(
            Op::SumAll,
            vec![self.clone()],
            self.value().sum_all(),
            self.requires_grad(),
        )
    }

    /// Repeat a rank-0 node into `shape`.
    pub fn broadcast_scalar(&self, shape: Vec<usize>) -> Result<Var> {
        let value = self.value().broadcast_scalar(shape)?;
        Ok(Var::build(
            Op::BroadcastScalar,
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Sum a rank-2 node along `axis` (kept with extent 1).
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let value = self.value().sum_axis(axis)?;
        Ok(Var::build(
            Op::SumAxis(axis),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Repeat a rank-2 node with extent 1 on `axis` up to extent `n`.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Var> {
        let value = self.value().broadcast_axis(axis, n)?;
        Ok(Var::build(
            Op::BroadcastAxis(axis),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    pub fn gather_rows(&self, indices: Vec<usize>) -> Result<Var> {
        let value = self.value().gather_rows(&indices)?;
        Ok(Var::build(
            Op::GatherRows(Arc::new(indices)),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Accumulate rows into a zero [rows, _] node at `indices`.
    pub fn scatter_add_rows(&self, indices: Vec<usize>, rows: usize) -> Result<Var> {
        let value = self.value().scatter_add_rows(&indices, rows)?;
        Ok(Var::build(
            Op::ScatterAddRows(Arc::new(indices)),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    pub fn gather_elems(&self, coords: Vec<(usize, usize)>) -> Result<Var> {
        let value = self.value().gather_elems(&coords)?;
        Ok(Var::build(
            Op::GatherElems(Arc::new(coords)),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    pub fn scatter_add_elems(
        &self,
        coords: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let value = self.value().scatter_add_elems(&coords, rows, cols)?;
        Ok(Var::build(
            Op::ScatterAddElems(Arc::new(coords)),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Max along `axis` of a rank-2 node. At ties the gradient flows to the
    /// first maximal index only.
    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        let value = self.value().max_axis(axis)?;
        Ok(Var::build(
            Op::MaxAxis(axis),
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    /// Max of a non-empty 1-D node as a rank-0 node; first index wins ties.
    pub fn max_all_1d(&self) -> Result<Var> {
        let value = self.value().max_all_1d()?;
        Ok(Var::build(
            Op::MaxAll1d,
            vec![self.clone()],
            value,
            self.requires_grad(),
        ))
    }

    // ---- composites -------------------------------------------------------------

    /// Mean of all elements as a rank-0 node.
    pub fn mean_all(&self) -> Result<Var> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::Empty("mean_all input"));
        }
        Ok(self.sum_all().scale_const(1.0 / n as f64))
    }

    /// Numerically stable log-softmax along the last axis of a rank-1 or
    /// rank-2 node. The max shift is detached; the result's gradient is
    /// exact regardless because the shift cancels inside the normalizer.
    pub fn log_softmax(&self) -> Result<Var> {
        match self.shape().len() {
            1 => {
                let n = self.shape()[0];
                let out = self.reshape(vec![1, n])?.log_softmax()?;
                out.reshape(vec![n])
            }
            2 => {
                let c = self.shape()[1];
                if c == 0 {
                    return Err(Error::Empty("log_softmax classes"));
                }
                let m = self.max_axis(1)?.stop_gradient();
                let shifted = self.sub(&m.broadcast_axis(1, c)?)?;
                let lse = shifted.exp().sum_axis(1)?.log()?;
                shifted.sub(&lse.broadcast_axis(1, c)?)
            }
            _ => Err(Error::BadShape {
                op: "log_softmax",
                shape: self.shape().to_vec(),
                detail: "expected rank 1 or 2".into(),
            }),
        }
    }

    /// Softmax along the last axis, computed as exp(log_softmax).
    pub fn softmax(&self) -> Result<Var> {
        Ok(self.log_softmax()?.exp())
    }

    /// Logistic sigmoid, elementwise.
    pub fn sigmoid(&self) -> Result<Var> {
        let denom = self.neg().exp().add_const(1.0);
        let one = Var::constant(Tensor::full(self.dtype(), self.shape().to_vec(), 1.0));
        one.div(&denom)
    }

    /// Multiply by a rank-0 node, broadcasting it over `self`'s shape.
    pub fn scale_by(&self, s: &Var) -> Result<Var> {
        if !s.value().is_scalar() {
            return Err(Error::BadShape {
                op: "scale_by",
                shape: s.shape().to_vec(),
                detail: "expected rank 0 multiplier".into(),
            });
        }
        if self.value().is_scalar() {
            return self.mul(s);
        }
        self.mul(&s.broadcast_scalar(self.shape().to_vec())?)
    }

    /// Sum of elementwise products; the inner product flattened over shape.
    pub fn dot(&self, rhs: &Var) -> Result<Var> {
        Ok(self.mul(rhs)?.sum_all())
    }

    /// Add a rank-1 bias of length C to every row of a [B, C] node.
    pub fn add_row_bias(&self, bias: &Var) -> Result<Var> {
        if self.shape().len() != 2 || bias.shape().len() != 1 || bias.shape()[0] != self.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = self.shape()[0];
        let c = self.shape()[1];
        let row = bias.reshape(vec![1, c])?.broadcast_axis(0, b)?;
        self.add(&row)
    }
}
