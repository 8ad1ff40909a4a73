//! Small feed-forward classifiers with named parameter groups.
//!
//! Parameters are organized into groups ("layer_0", ..., "extra", "head") so
//! an editor can be restricted to a subset of layers. A [`ParamSet`] holds
//! plain tensors (the checkpointable state); [`ParamVars`] is its graph-side
//! mirror holding autodiff nodes, used to build forward passes and edits.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Dtype, Tensor};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Optional residual block inserted before the output layer. Its second
/// linear layer is zero-initialized so a model with a fresh block computes
/// exactly the same function as the model without it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraBlockConfig {
    pub hidden_dim: usize,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

/// Architecture description. Training defaults to f32; numerical tests use
/// f64 via the `dtype` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    #[serde(default)]
    pub extra_block: Option<ExtraBlockConfig>,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden_dims must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if let Some(eb) = &self.extra_block {
            if eb.hidden_dim == 0 {
                return Err(Error::InvalidConfig(
                    "extra_block.hidden_dim must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Width of the representation entering the head (= last hidden dim;
    /// the extra block is residual and preserves width).
    fn head_in(&self) -> usize {
        *self.hidden_dims.last().expect("validated non-empty")
    }
}

/// One tensor with its within-group name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// A named group of tensors; the unit of editability.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<NamedTensor>,
}

/// Ordered parameter groups plus the set of groups an editor may modify.
/// Cloning yields a fully independent deep copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
    editable: Vec<String>,
}

impl ParamSet {
    pub fn new(groups: Vec<ParamGroup>) -> Result<ParamSet> {
        if groups.is_empty() {
            return Err(Error::Empty("parameter groups"));
        }
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate parameter group {:?}",
                    g.name
                )));
            }
        }
        let editable = groups.iter().map(|g| g.name.clone()).collect();
        Ok(ParamSet { groups, editable })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Editable group names, in group order.
    pub fn editable(&self) -> &[String] {
        &self.editable
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    /// A copy whose editable mask is exactly `names`. Order is normalized to
    /// group order; unknown names and an empty selection are errors.
    pub fn select_editable<S: AsRef<str>>(&self, names: &[S]) -> Result<ParamSet> {
        if names.is_empty() {
            return Err(Error::Empty("editable group selection"));
        }
        for n in names {
            if self.group(n.as_ref()).is_none() {
                return Err(Error::UnknownGroup(n.as_ref().to_string()));
            }
        }
        let editable = self
            .groups
            .iter()
            .filter(|g| names.iter().any(|n| n.as_ref() == g.name))
            .map(|g| g.name.clone())
            .collect();
        let mut out = self.clone();
        out.editable = editable;
        Ok(out)
    }

    /// Iterate (group name, tensor name, tensor) in canonical order.
    pub fn flat_iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.groups.iter().flat_map(|g| {
            g.tensors
                .iter()
                .map(move |t| (g.name.as_str(), t.name.as_str(), &t.value))
        })
    }

    pub fn num_tensors(&self) -> usize {
        self.groups.iter().map(|g| g.tensors.len()).sum()
    }

    pub fn dtype(&self) -> Dtype {
        self.groups[0].tensors[0].value.dtype()
    }
}

fn glorot(rng: &mut rand_chacha::ChaCha8Rng, dtype: Dtype, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| (rng::uniform(rng) * 2.0 - 1.0) * bound)
        .collect();
    Tensor::from_f64(vec![fan_in, fan_out], data)
        .expect("shape matches data length")
        .cast(dtype)
}

fn linear_group(
    rng: &mut rand_chacha::ChaCha8Rng,
    dtype: Dtype,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> ParamGroup {
    ParamGroup {
        name: name.to_string(),
        tensors: vec![
            NamedTensor {
                name: "w".into(),
                value: glorot(rng, dtype, fan_in, fan_out),
            },
            NamedTensor {
                name: "b".into(),
                value: Tensor::zeros(dtype, vec![fan_out]),
            },
        ],
    }
}

fn extra_group(
    rng: &mut rand_chacha::ChaCha8Rng,
    dtype: Dtype,
    width: usize,
    hidden: usize,
) -> ParamGroup {
    ParamGroup {
        name: "extra".into(),
        tensors: vec![
            NamedTensor {
                name: "w1".into(),
                value: glorot(rng, dtype, width, hidden),
            },
            NamedTensor {
                name: "b1".into(),
                value: Tensor::zeros(dtype, vec![hidden]),
            },
            // Zero-init output projection: the residual block starts as the
            // identity, so attaching it cannot change predictions.
            NamedTensor {
                name: "w2".into(),
                value: Tensor::zeros(dtype, vec![hidden, width]),
            },
            NamedTensor {
                name: "b2".into(),
                value: Tensor::zeros(dtype, vec![width]),
            },
        ],
    }
}

/// Fresh parameters: weights Glorot-uniform in
/// (-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))), biases zero.
/// Deterministic per seed. All groups start editable.
pub fn init(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = rng::stream_rng(seed, Stream::Init);
    let dt = config.dtype;
    let mut groups = Vec::new();
    let mut d_in = config.input_dim;
    for (i, &h) in config.hidden_dims.iter().enumerate() {
        groups.push(linear_group(&mut rng, dt, &format!("layer_{i}"), d_in, h));
        d_in = h;
    }
    if let Some(eb) = &config.extra_block {
        groups.push(extra_group(&mut rng, dt, config.head_in(), eb.hidden_dim));
    }
    groups.push(linear_group(&mut rng, dt, "head", d_in, config.num_classes));
    ParamSet::new(groups)
}

/// A copy of `teacher` with a freshly initialized zero-output extra block
/// inserted before the head, for fine-tuning. `config` must carry the
/// block; the teacher must have been built without one.
pub fn add_extra_block(teacher: &ParamSet, config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let Some(eb) = &config.extra_block else {
        return Err(Error::InvalidConfig(
            "add_extra_block requires config.extra_block".into(),
        ));
    };
    if teacher.group("extra").is_some() {
        return Err(Error::InvalidConfig(
            "teacher already has an extra block".into(),
        ));
    }
    let mut rng = rng::stream_rng(seed, Stream::Init);
    let mut groups = Vec::new();
    for g in teacher.groups() {
        if g.name == "head" {
            groups.push(extra_group(
                &mut rng,
                teacher.dtype(),
                config.head_in(),
                eb.hidden_dim,
            ));
        }
        groups.push(g.clone());
    }
    ParamSet::new(groups)
}

// ---- graph-side parameters ---------------------------------------------------

/// One group of autodiff nodes mirroring a [`ParamGroup`].
#[derive(Debug, Clone)]
pub struct GroupVars {
    pub name: String,
    pub editable: bool,
    pub vars: Vec<(String, Var)>,
}

/// Graph-side mirror of a [`ParamSet`]: same group/tensor structure, but the
/// values are autodiff nodes. The editor reads the `editable` flags to know
/// which nodes it may update.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub groups: Vec<GroupVars>,
}

impl ParamVars {
    fn from_params_with(params: &ParamSet, make: impl Fn(&Tensor, bool) -> Var) -> ParamVars {
        let groups = params
            .groups()
            .iter()
            .map(|g| {
                let editable = params.editable().iter().any(|e| e == &g.name);
                GroupVars {
                    name: g.name.clone(),
                    editable,
                    vars: g
                        .tensors
                        .iter()
                        .map(|t| (t.name.clone(), make(&t.value, editable)))
                        .collect(),
                }
            })
            .collect();
        ParamVars { groups }
    }

    /// Every tensor becomes a differentiable leaf. Used by training, where
    /// the outer gradient flows into all parameters.
    pub fn leaves(params: &ParamSet) -> ParamVars {
        Self::from_params_with(params, |t, _| Var::leaf(t.clone()))
    }

    /// Editable tensors become differentiable leaves; everything else is a
    /// constant. Used for standalone (non-training) edits, where gradients
    /// of non-edited groups are never needed.
    pub fn edit_leaves(params: &ParamSet) -> ParamVars {
        Self::from_params_with(
            params,
            |t, editable| {
                if editable {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            },
        )
    }

    /// Every tensor becomes a constant. Pure inference.
    pub fn constants(params: &ParamSet) -> ParamVars {
        Self::from_params_with(params, |t, _| Var::constant(t.clone()))
    }

    /// Snapshot current node values back into a [`ParamSet`], preserving the
    /// editable mask.
    pub fn snapshot(&self) -> Result<ParamSet> {
        let groups = self
            .groups
            .iter()
            .map(|g| ParamGroup {
                name: g.name.clone(),
                tensors: g
                    .vars
                    .iter()
                    .map(|(n, v)| NamedTensor {
                        name: n.clone(),
                        value: v.value().clone(),
                    })
                    .collect(),
            })
            .collect();
        let editable: Vec<String> = self
            .groups
            .iter()
            .filter(|g| g.editable)
            .map(|g| g.name.clone())
            .collect();
        let base = ParamSet::new(groups)?;
        let names: Vec<&str> = editable.iter().map(|s| s.as_str()).collect();
        base.select_editable(&names)
    }

    pub fn var(&self, group: &str, name: &str) -> Option<&Var> {
        self.groups
            .iter()
            .find(|g| g.name == group)?
            .vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    /// Editable nodes in canonical (group, tensor) order.
    pub fn editable_vars(&self) -> Vec<Var> {
        self.groups
            .iter()
            .filter(|g| g.editable)
            .flat_map(|g| g.vars.iter().map(|(_, v)| v.clone()))
            .collect()
    }

    /// All nodes in canonical order.
    pub fn all_vars(&self) -> Vec<Var> {
        self.groups
            .iter()
            .flat_map(|g| g.vars.iter().map(|(_, v)| v.clone()))
            .collect()
    }

    /// Structure-preserving replacement of the editable nodes; `new` must
    /// match [`ParamVars::editable_vars`] order and length.
    pub fn with_editable_replaced(&self, new: &[Var]) -> Result<ParamVars> {
        let expected: usize = self
            .groups
            .iter()
            .filter(|g| g.editable)
            .map(|g| g.vars.len())
            .sum();
        if new.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "editable replacement expects {expected} vars, got {}",
                new.len()
            )));
        }
        let mut it = new.iter();
        let groups = self
            .groups
            .iter()
            .map(|g| GroupVars {
                name: g.name.clone(),
                editable: g.editable,
                vars: g
                    .vars
                    .iter()
                    .map(|(n, v)| {
                        let nv = if g.editable {
                            it.next().expect("length checked").clone()
                        } else {
                            v.clone()
                        };
                        (n.clone(), nv)
                    })
                    .collect(),
            })
            .collect();
        Ok(ParamVars { groups })
    }
}

/// Forward pass producing logits [B, C]. Differentiable with respect to all
/// parameter nodes that require gradients.
pub fn forward(config: &ModelConfig, params: &ParamVars, batch: &Var) -> Result<Var> {
    if batch.shape().len() != 2 || batch.shape()[1] != config.input_dim {
        return Err(Error::BadShape {
            op: "forward",
            shape: batch.shape().to_vec(),
            detail: format!("expected [B, {}]", config.input_dim),
        });
    }
    let act = |v: Var| -> Var {
        match config.activation {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
        }
    };
    let need = |group: &str, name: &str| -> Result<Var> {
        params
            .var(group, name)
            .cloned()
            .ok_or_else(|| Error::UnknownGroup(format!("{group}/{name}")))
    };
    let mut h = batch.clone();
    for i in 0..config.hidden_dims.len() {
        let g = format!("layer_{i}");
        let w = need(&g, "w")?;
        let b = need(&g, "b")?;
        h = act(h.matmul(&w)?.add_row_bias(&b)?);
    }
    if config.extra_block.is_some() {
        let w1 = need("extra", "w1")?;
        let b1 = need("extra", "b1")?;
        let w2 = need("extra", "w2")?;
        let b2 = need("extra", "b2")?;
        let block = act(h.matmul(&w1)?.add_row_bias(&b1)?)
            .matmul(&w2)?
            .add_row_bias(&b2)?;
        h = h.add(&block)?;
    }
    let w = need("head", "w")?;
    let b = need("head", "b")?;
    h.matmul(&w)?.add_row_bias(&b)
}

/// Mean over the batch of -log_softmax(logits)[label].
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    if logits.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "cross_entropy",
            shape: logits.shape().to_vec(),
            detail: "expected rank 2 logits".into(),
        });
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 {
        return Err(Error::Empty("cross_entropy batch"));
    }
    if b != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::IndexOutOfBounds {
            op: "cross_entropy",
            index: bad,
            len: c,
        });
    }
    let coords: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let picked = logits.log_softmax()?.gather_elems(coords)?;
    Ok(picked.sum_all().scale_const(-1.0 / b as f64))
}

/// Fraction of rows whose argmax differs from the label.
pub fn classification_error(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = logits.argmax_rows()?;
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_error",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("classification_error batch"));
    }
    let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}
