//! Datasets, loaders and binary serialization.
//!
//! Two binary formats are owned by this crate and kept bit-exact:
//!
//! - checkpoint ("EDNN"): magic, u32 version, u32 tensor count; per tensor a
//!   u16 name length + UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//!   u32 dims, then raw little-endian data; finally u32 config length +
//!   UTF-8 JSON config. All header integers are little-endian.
//! - descriptor matrix ("EDDM"): magic, u32 rows, u32 cols (little-endian),
//!   then row-major f32 little-endian data.
//!
//! Loaders for the IDX (big-endian, per its own spec) and CIFAR-10 binary
//! layouts are provided for real image data; nothing in the test suite
//! requires them as input files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{NamedTensor, ParamGroup, ParamSet};
use crate::rng::{self, Stream};
use crate::tensor::{Dtype, Tensor};

/// A labeled dataset with a train/test split over row indices. Features are
/// stored as f64 and cast to the model dtype when batches are built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

impl Dataset {
    /// New dataset with every row in the train split.
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if features.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "Dataset::new",
                shape: features.shape().to_vec(),
                detail: "features must be [N, d]".into(),
            });
        }
        let n = features.shape()[0];
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::IndexOutOfBounds {
                op: "Dataset::new",
                index: bad,
                len: num_classes,
            });
        }
        Ok(Dataset {
            features: features.cast(Dtype::F64),
            labels,
            num_classes,
            train_idx: (0..n).collect(),
            test_idx: vec![],
        })
    }

    pub fn n(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_idx
    }

    /// Shuffle all rows with the split stream of `seed` and assign the
    /// first `train_count` to the train split, the rest to the test split.
    pub fn split_random(&self, train_count: usize, seed: u64) -> Result<Dataset> {
        let n = self.n();
        if train_count == 0 || train_count >= n {
            return Err(Error::InvalidConfig(format!(
                "train_count must be in (0, {n}), got {train_count}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::stream_rng(seed, Stream::Split);
        // Fisher-Yates; draw order is part of the determinism contract.
        for i in (1..n).rev() {
            let j = rng::below(&mut rng, i + 1);
            order.swap(i, j);
        }
        let mut out = self.clone();
        out.train_idx = order[..train_count].to_vec();
        out.test_idx = order[train_count..].to_vec();
        Ok(out)
    }

    /// Feature rows at `indices`, cast to `dtype`, plus their labels.
    pub fn batch(&self, indices: &[usize], dtype: Dtype) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.gather_rows(indices)?.cast(dtype);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Standardize every feature to zero mean and unit variance, with the
    /// statistics computed on the train split only. Constant features are
    /// left centered but unscaled.
    pub fn standardize(&self) -> Result<Dataset> {
        if self.train_idx.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let d = self.dim();
        let train = self.features.gather_rows(&self.train_idx)?.to_f64_vec();
        let n = self.train_idx.len() as f64;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in train.chunks_exact(d) {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for row in train.chunks_exact(d) {
            for (j, &v) in row.iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let all = self.features.to_f64_vec();
        let scaled: Vec<f64> = all
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - mean[j]) / std[j])
                    .collect::<Vec<f64>>()
            })
            .collect();
        let mut out = self.clone();
        out.features = Tensor::from_f64(vec![self.n(), d], scaled)?;
        Ok(out)
    }
}

/// Synthetic Gaussian-blob classification data: per class, a center with
/// standard-normal coordinates, then `per_class` points at center +
/// spread * noise. Deterministic per seed; rows are class-major.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "per_class and dim must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "spread must be non-negative and finite, got {spread}"
        )));
    }
    let mut rng = rng::stream_rng(seed, Stream::Blobs);
    let centers: Vec<f64> = (0..num_classes * dim).map(|_| rng::normal(&mut rng)).collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..per_class {
            for j in 0..dim {
                data.push(centers[c * dim + j] + spread * rng::normal(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_f64(vec![n, dim], data)?, labels, num_classes)
}

// ---- byte-level reader with offset-carrying errors ------------------------------

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> ByteReader<'a> {
        ByteReader {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16_le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

// ---- IDX ------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let d = rows * cols;
    let raw = r.take(n * d)?;
    if !r.done() {
        return Err(r.fail("trailing bytes after image data"));
    }
    Ok((n, d, raw.iter().map(|&b| b as f64 / 255.0).collect()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.u32_be()? as usize;
    let raw = r.take(n)?;
    if !r.done() {
        return Err(r.fail("trailing bytes after label data"));
    }
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label file pair (the MNIST layout). Pixels are scaled
/// to [0, 1]; the class count is max(label) + 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, d, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 4,
            detail: format!("{} labels for {n} images", labels.len()),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(Tensor::from_f64(vec![n, d], pixels)?, labels, num_classes)
}

// ---- CIFAR-10 binary --------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

/// Load CIFAR-10 binary batch files (per record: 1 label byte + 3072 pixel
/// bytes). Pixels are scaled to [0, 1].
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Empty("cifar file list"));
    }
    let mut data: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: p.display().to_string(),
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                detail: format!(
                    "file length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Format {
                    path: p.display().to_string(),
                    offset: (i * CIFAR_RECORD) as u64,
                    detail: format!("label byte {label} out of range"),
                });
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_f64(vec![n, CIFAR_PIXELS], data)?,
        labels,
        CIFAR_CLASSES,
    )
}

// ---- checkpoint -----------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"EDNN";
const CKPT_VERSION: u32 = 1;
/// Model tensors are namespaced to keep them apart from auxiliary tensors
/// (trainable editor scalars) in the flat name list.
const PARAM_PREFIX: &str = "params/";

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    /// Auxiliary named tensors (e.g. "editor_log_alpha").
    pub extra: Vec<(String, Tensor)>,
    pub run_config: serde_json::Value,
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    editable: Vec<String>,
    run_config: serde_json::Value,
}

fn dtype_tag(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::InvalidConfig(format!("tensor name too long: {name}")));
    }
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(dtype_tag(t.dtype()));
    let rank = t.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::BadShape {
            op: "save_checkpoint",
            shape: t.shape().to_vec(),
            detail: "rank exceeds u8".into(),
        });
    }
    out.push(rank as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(())
}

/// Serialize parameters, auxiliary tensors and a run config. The editable
/// mask rides inside the embedded config text so the round trip restores it.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    extra: &[(String, Tensor)],
    run_config: &serde_json::Value,
) -> Result<()> {
    for (name, _) in extra {
        if name.starts_with(PARAM_PREFIX) {
            return Err(Error::InvalidConfig(format!(
                "auxiliary tensor name {name:?} collides with the parameter namespace"
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let count = params.num_tensors() + extra.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (group, name, t) in params.flat_iter() {
        push_tensor(&mut out, &format!("{PARAM_PREFIX}{group}/{name}"), t)?;
    }
    for (name, t) in extra {
        push_tensor(&mut out, name, t)?;
    }
    let meta = CheckpointMeta {
        editable: params.editable().to_vec(),
        run_config: run_config.clone(),
    };
    let cfg_text = serde_json::to_string(&meta)?;
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}"),
        });
    }
    let version = r.u32_le()?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32_le()? as usize;
    let mut named: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16_le()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| r.fail(format!("tensor name is not UTF-8: {e}")))?;
        let dtype = match r.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(r.fail(format!("unknown dtype tag {other}"))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32_le()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.take(numel * dtype.size_bytes())?;
        named.push((name, Tensor::from_le_bytes(dtype, shape, data)?));
    }
    let cfg_len = r.u32_le()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|e| r.fail(format!("config is not UTF-8: {e}")))?;
    if !r.done() {
        return Err(r.fail("trailing bytes after config"));
    }
    let meta: CheckpointMeta = serde_json::from_str(&cfg_text)?;

    // Rebuild groups in first-appearance order from the namespaced names.
    let mut groups: Vec<ParamGroup> = Vec::new();
    let mut extra: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in named {
        if let Some(rest) = name.strip_prefix(PARAM_PREFIX) {
            let Some((group, tname)) = rest.split_once('/') else {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    detail: format!("parameter name {name:?} lacks a group"),
                });
            };
            let nt = NamedTensor {
                name: tname.to_string(),
                value: tensor,
            };
            match groups.iter_mut().find(|g| g.name == group) {
                Some(g) => g.tensors.push(nt),
                None => groups.push(ParamGroup {
                    name: group.to_string(),
                    tensors: vec![nt],
                }),
            }
        } else {
            extra.push((name, tensor));
        }
    }
    let params = ParamSet::new(groups)?;
    let editable: Vec<&str> = meta.editable.iter().map(|s| s.as_str()).collect();
    let params = params.select_editable(&editable)?;
    Ok(Checkpoint {
        params,
        extra,
        run_config: meta.run_config,
        version,
    })
}

// ---- descriptor matrix ---------------------------------------------------------

const EDDM_MAGIC: &[u8; 4] = b"EDDM";

/// Write a rank-2 f32 tensor in the "EDDM" layout.
pub fn write_descriptor_matrix(path: &Path, matrix: &Tensor) -> Result<()> {
    if matrix.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "write_descriptor_matrix",
            shape: matrix.shape().to_vec(),
            detail: "expected rank 2".into(),
        });
    }
    let m = matrix.cast(Dtype::F32);
    let mut out = Vec::with_capacity(12 + m.numel() * 4);
    out.extend_from_slice(EDDM_MAGIC);
    out.extend_from_slice(&(m.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(m.shape()[1] as u32).to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Read an "EDDM" file back into a rank-2 f32 tensor.
pub fn read_descriptor_matrix(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != EDDM_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {EDDM_MAGIC:?}"),
        });
    }
    let rows = r.u32_le()? as usize;
    let cols = r.u32_le()? as usize;
    let data = r.take(rows * cols * 4)?;
    if !r.done() {
        return Err(r.fail("trailing bytes after matrix data"));
    }
    Tensor::from_le_bytes(Dtype::F32, vec![rows, cols], data)
}
