//! Outer training loop for editable classifiers.
//!
//! The objective is `L_base + c_edit * L_edit + c_loc * L_loc`:
//!
//! - `L_base`: cross-entropy on the batch, or a distillation KL against a
//!   teacher model;
//! - `L_edit`: hinge of the constraint value after a differentiable editor
//!   unroll, pushing the editor to succeed within its step budget;
//! - `L_loc`: mean KL from the original predictions (held constant) to the
//!   edited model's predictions on a control batch, penalizing side effects.
//!
//! Each outer step samples a batch and one edit constraint, unrolls the
//! editor inside the graph, and takes one Adam step on the model parameters
//! and on any trainable editor scalars. With `c_edit = c_loc = 0` the loop
//! reduces exactly, bit for bit, to plain training; [`train_baseline`] is an
//! independently written plain loop used to verify that collapse.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::backward::grad;
use crate::autodiff::Var;
use crate::constraints::{constraint_loss, EditConstraint, SamplerStrategy, TargetSampler};
use crate::data_io::Dataset;
use crate::editors::{
    edit_graph, EditMode, EditTrace, EditorConfig, EditorParamValues, EditorParams,
};
use crate::error::{Error, Result};
use crate::models::{self, cross_entropy, forward, ModelConfig, ParamSet, ParamVars};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// What `L_base` measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    #[default]
    CrossEntropy,
    /// Mean KL from a teacher model's predictions to the student's. The
    /// teacher is passed to [`fine_tune`]; plain [`train`] rejects this.
    DistillKl,
}

/// Where the locality control batch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlBatch {
    /// Reuse the training batch of the same step (the cheap default).
    #[default]
    SameBatch,
    /// Draw a second, independent batch for the locality term.
    FreshBatch,
}

/// How edit constraints are drawn during training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSampling {
    /// Edit input uniform over the train split, target class uniform.
    #[default]
    Uniform,
    /// Target chosen by rank under the current model's predicted ordering;
    /// the vector is a probability histogram indexed by rank (0 = argmax).
    RankMatched(Vec<f64>),
}

fn default_c_edit() -> f64 {
    0.01
}

fn default_c_loc() -> f64 {
    0.01
}

fn default_outer_lr() -> f64 {
    1e-3
}

fn default_batch_size() -> usize {
    64
}

fn default_epochs() -> usize {
    5
}

fn default_true() -> bool {
    true
}

/// Outer-loop configuration. The outer optimizer is Adam with fixed
/// moment decays (0.9, 0.999); only its step size is configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the post-edit hinge term.
    #[serde(default = "default_c_edit")]
    pub c_edit: f64,
    /// Weight of the locality KL term.
    #[serde(default = "default_c_loc")]
    pub c_loc: f64,
    pub editor: EditorConfig,
    #[serde(default = "default_outer_lr")]
    pub outer_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Differentiate through the inner gradients (true) or treat them as
    /// constants so only the first-order term trains (false).
    #[serde(default = "default_true")]
    pub second_order: bool,
    #[serde(default)]
    pub base_loss: BaseLoss,
    #[serde(default)]
    pub control_batch: ControlBatch,
    #[serde(default)]
    pub sampling: ConstraintSampling,
    /// Parameter groups the inner editor may modify; `None` leaves the
    /// model's default mask (every group).
    #[serde(default)]
    pub editable_groups: Option<Vec<String>>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_edit >= 0.0 && self.c_edit.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "c_edit must be finite and non-negative, got {}",
                self.c_edit
            )));
        }
        if !(self.c_loc >= 0.0 && self.c_loc.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "c_loc must be finite and non-negative, got {}",
                self.c_loc
            )));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "outer_lr must be finite and positive, got {}",
                self.outer_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        self.editor.validate()
    }

    fn sampler_strategy(&self) -> SamplerStrategy {
        match &self.sampling {
            ConstraintSampling::Uniform => SamplerStrategy::Uniform,
            ConstraintSampling::RankMatched(h) => SamplerStrategy::RankMatched(h.clone()),
        }
    }
}

/// One outer step's losses and editor state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(rename = "L_base")]
    pub l_base: f64,
    #[serde(rename = "L_edit")]
    pub l_edit: f64,
    #[serde(rename = "L_loc")]
    pub l_loc: f64,
    /// Inner editor steps executed this outer step (0 when no edit ran).
    pub steps_taken: usize,
    /// Effective editor scalars after this step's update.
    pub alpha: f64,
    pub beta: f64,
    /// Wall time of the step. Excluded from the JSON-lines output unless
    /// timings are requested, so that repeat runs stay byte-identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Per-step training records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// One JSON object per line. With `include_timings` false, the wall_ms
    /// field is dropped and the output is a pure function of the run inputs.
    pub fn to_jsonl(&self, include_timings: bool) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = if include_timings {
                serde_json::to_string(r)?
            } else {
                let mut r = r.clone();
                r.wall_ms = None;
                serde_json::to_string(&r)?
            };
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }
}

// ---- loss terms -------------------------------------------------------------------

/// Mean over rows of KL(p || q), with p taken from `reference_logits` and
/// treated as a constant (no gradient flows into the reference side) and q
/// from `logits`. Both inputs are raw logits of shape [B, C].
pub fn mean_kl(reference_logits: &Var, logits: &Var) -> Result<Var> {
    if reference_logits.shape() != logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_kl",
            lhs: reference_logits.shape().to_vec(),
            rhs: logits.shape().to_vec(),
        });
    }
    if reference_logits.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "mean_kl",
            shape: reference_logits.shape().to_vec(),
            detail: "expected [B, C] logits".into(),
        });
    }
    let b = reference_logits.shape()[0];
    if b == 0 {
        return Err(Error::Empty("mean_kl batch"));
    }
    let stopped = reference_logits.stop_gradient();
    let p = stopped.softmax()?;
    let log_p = stopped.log_softmax()?;
    let log_q = logits.log_softmax()?;
    Ok(p.mul(&log_p.sub(&log_q)?)?.sum_all().scale_const(1.0 / b as f64))
}

/// Hinge of the constraint value after an editor unroll: zero exactly when
/// the edit lands with margin. Returns the loss together with the edited
/// parameters (for the locality term) and the editor trace.
pub fn edit_loss(
    model_cfg: &ModelConfig,
    params: &ParamVars,
    constraint: &EditConstraint,
    editor_cfg: &EditorConfig,
    editor_params: Option<&EditorParams>,
    mode: EditMode,
) -> Result<(Var, ParamVars, EditTrace)> {
    let (edited, trace) = edit_graph(model_cfg, params, constraint, editor_cfg, editor_params, mode)?;
    let l_e = constraint_loss(model_cfg, &edited, constraint)?;
    Ok((l_e.relu(), edited, trace))
}

/// Mean KL from the original model's predictions (constants) to the edited
/// model's predictions on a control batch. Zero iff the edit left the
/// control predictions unchanged.
pub fn locality_loss(
    model_cfg: &ModelConfig,
    original: &ParamVars,
    edited: &ParamVars,
    control: &Var,
) -> Result<Var> {
    if control.shape().first() == Some(&0) {
        return Err(Error::Empty("control batch"));
    }
    let reference = forward(model_cfg, original, control)?;
    let edited_logits = forward(model_cfg, edited, control)?;
    mean_kl(&reference, &edited_logits)
}

/// The assembled objective and its components.
#[derive(Debug, Clone)]
pub struct ObjectiveParts {
    pub total: Var,
    pub l_base: Var,
    pub l_edit: Var,
    pub l_loc: Var,
    /// Present when an edit was unrolled (some weight is nonzero).
    pub trace: Option<EditTrace>,
}

/// Build the full objective graph for one step. With both weights zero the
/// edit machinery is skipped entirely and `total` is the very same node as
/// `l_base`, so plain training is recovered exactly. `constraint` may be
/// `None` only in that case; `teacher` is required for the distillation
/// base loss.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    model_cfg: &ModelConfig,
    params: &ParamVars,
    batch: &Var,
    labels: &[usize],
    control: &Var,
    constraint: Option<&EditConstraint>,
    cfg: &TrainConfig,
    editor_params: Option<&EditorParams>,
    teacher: Option<(&ModelConfig, &ParamSet)>,
) -> Result<ObjectiveParts> {
    let l_base = match cfg.base_loss {
        BaseLoss::CrossEntropy => {
            let logits = forward(model_cfg, params, batch)?;
            cross_entropy(&logits, labels)?
        }
        BaseLoss::DistillKl => {
            let (teacher_cfg, teacher_params) = teacher.ok_or_else(|| {
                Error::InvalidConfig("distill_kl base loss requires a teacher model".into())
            })?;
            let teacher_vars = ParamVars::constants(teacher_params);
            let reference = forward(teacher_cfg, &teacher_vars, batch)?;
            let student = forward(model_cfg, params, batch)?;
            mean_kl(&reference, &student)?
        }
    };
    if cfg.c_edit == 0.0 && cfg.c_loc == 0.0 {
        let zero = Var::constant(Tensor::scalar(model_cfg.dtype, 0.0));
        return Ok(ObjectiveParts {
            total: l_base.clone(),
            l_base,
            l_edit: zero.clone(),
            l_loc: zero,
            trace: None,
        });
    }
    let constraint = constraint.ok_or_else(|| {
        Error::InvalidConfig("an edit constraint is required when c_edit or c_loc is nonzero".into())
    })?;
    let mode = EditMode::Differentiable {
        second_order: cfg.second_order,
    };
    let (l_edit, edited, trace) =
        edit_loss(model_cfg, params, constraint, &cfg.editor, editor_params, mode)?;
    let l_loc = locality_loss(model_cfg, params, &edited, control)?;
    let total = l_base
        .add(&l_edit.scale_const(cfg.c_edit))?
        .add(&l_loc.scale_const(cfg.c_loc))?;
    Ok(ObjectiveParts {
        total,
        l_base,
        l_edit,
        l_loc,
        trace: Some(trace),
    })
}

// ---- outer optimizer ---------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Textbook Adam over a flat f64 parameter vector.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn flatten(params: &ParamSet) -> Vec<f64> {
    params
        .flat_iter()
        .flat_map(|(_, _, t)| t.to_f64_vec())
        .collect()
}

/// Rebuild a parameter set with `template`'s structure, mask and dtypes from
/// a flat f64 vector in canonical order.
fn unflatten(template: &ParamSet, flat: &[f64]) -> Result<ParamSet> {
    use crate::models::{NamedTensor, ParamGroup};
    let mut pos = 0usize;
    let mut groups = Vec::with_capacity(template.groups().len());
    for g in template.groups() {
        let mut tensors = Vec::with_capacity(g.tensors.len());
        for t in &g.tensors {
            let n = t.value.numel();
            let tensor = Tensor::from_f64(t.value.shape().to_vec(), flat[pos..pos + n].to_vec())?
                .cast(t.value.dtype());
            pos += n;
            tensors.push(NamedTensor {
                name: t.name.clone(),
                value: tensor,
            });
        }
        groups.push(ParamGroup {
            name: g.name.clone(),
            tensors,
        });
    }
    let out = ParamSet::new(groups)?;
    let names: Vec<&str> = template.editable().iter().map(|s| s.as_str()).collect();
    out.select_editable(&names)
}

fn flat_gradient(root: &Var, wrt: &[Var]) -> Result<Vec<f64>> {
    let gmap = grad(root, wrt)?;
    Ok(wrt
        .iter()
        .flat_map(|v| gmap.get_or_zero(v).value().to_f64_vec())
        .collect())
}

fn draw_batch(rng: &mut rand_chacha::ChaCha8Rng, pool: &[usize], count: usize) -> Vec<usize> {
    (0..count).map(|_| pool[rng::below(rng, pool.len())]).collect()
}

// ---- training loops ----------------------------------------------------------------

/// Train a fresh model with the editable-training objective. Returns the
/// final parameters, the editor config with any learned scalars written
/// back, and the per-step log. Deterministic per seed.
pub fn train(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet, EditorConfig, TrainLog)> {
    if cfg.base_loss == BaseLoss::DistillKl {
        return Err(Error::InvalidConfig(
            "distill_kl base loss requires fine_tune with a teacher".into(),
        ));
    }
    let mut params = models::init(model_cfg, seed)?;
    if let Some(groups) = &cfg.editable_groups {
        params = params.select_editable(groups)?;
    }
    run_training(model_cfg, params, dataset, cfg, seed, None)
}

/// Like [`train`], but resumes from existing parameters instead of a fresh
/// initialization. Optimizer state and batch draws start over; only the
/// starting point differs.
pub fn train_from(
    model_cfg: &ModelConfig,
    initial: &ParamSet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet, EditorConfig, TrainLog)> {
    if cfg.base_loss == BaseLoss::DistillKl {
        return Err(Error::InvalidConfig(
            "distill_kl base loss requires fine_tune with a teacher".into(),
        ));
    }
    let mut params = initial.clone();
    if let Some(groups) = &cfg.editable_groups {
        params = params.select_editable(groups)?;
    }
    run_training(model_cfg, params, dataset, cfg, seed, None)
}

/// Distillation-based editable fine-tuning: the student starts from the
/// teacher (plus a zero-initialized extra block when the student config has
/// one, so the initial distillation loss is exactly zero) and trains with
/// `L_base` = mean KL(teacher || student).
pub fn fine_tune(
    teacher_cfg: &ModelConfig,
    teacher: &ParamSet,
    student_cfg: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet, EditorConfig, TrainLog)> {
    if cfg.base_loss != BaseLoss::DistillKl {
        return Err(Error::InvalidConfig(
            "fine_tune requires base_loss = distill_kl".into(),
        ));
    }
    if teacher_cfg.dtype != student_cfg.dtype {
        return Err(Error::DtypeMismatch {
            op: "fine_tune",
            lhs: teacher_cfg.dtype,
            rhs: student_cfg.dtype,
        });
    }
    let mut student = if student_cfg.extra_block.is_some() {
        models::add_extra_block(teacher, student_cfg, seed)?
    } else {
        teacher.clone()
    };
    if let Some(groups) = &cfg.editable_groups {
        student = student.select_editable(groups)?;
    }
    run_training(
        student_cfg,
        student,
        dataset,
        cfg,
        seed,
        Some((teacher_cfg, teacher)),
    )
}

fn run_training(
    model_cfg: &ModelConfig,
    initial: ParamSet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    teacher: Option<(&ModelConfig, &ParamSet)>,
) -> Result<(ParamSet, EditorConfig, TrainLog)> {
    model_cfg.validate()?;
    cfg.validate()?;
    if dataset.train_indices().is_empty() {
        return Err(Error::Empty("train split"));
    }
    let dtype = model_cfg.dtype;
    let needs_edit = cfg.c_edit != 0.0 || cfg.c_loc != 0.0;
    let feats = dataset.features().cast(dtype);
    let train_pool = dataset.train_indices().to_vec();
    let steps_per_epoch = train_pool.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut batch_rng = rng::stream_rng(seed, Stream::Batch);
    let mut sampler = if needs_edit {
        Some(TargetSampler::new(cfg.sampler_strategy(), seed)?)
    } else {
        None
    };
    let mut editor_values = EditorParamValues::from_config(&cfg.editor);
    let mut params = initial;
    let n_model = flatten(&params).len();
    let n_opt =
        n_model + cfg.editor.alpha_trainable() as usize + cfg.editor.beta_trainable() as usize;
    let mut opt = Adam::new(n_opt, cfg.outer_lr);
    let mut records = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let started = Instant::now();
        let idx = draw_batch(&mut batch_rng, &train_pool, cfg.batch_size);
        let (bx, by) = dataset.batch(&idx, dtype)?;
        let batch = Var::constant(bx);
        let control = if needs_edit && cfg.control_batch == ControlBatch::FreshBatch {
            let cidx = draw_batch(&mut batch_rng, &train_pool, cfg.batch_size);
            Var::constant(dataset.batch(&cidx, dtype)?.0)
        } else {
            batch.clone()
        };

        let constraint = match &mut sampler {
            Some(s) => {
                let scores = if matches!(cfg.sampling, ConstraintSampling::RankMatched(_)) {
                    let pv = ParamVars::constants(&params);
                    Some(forward(model_cfg, &pv, &Var::constant(feats.clone()))?.value().clone())
                } else {
                    None
                };
                Some(s.sample(&feats, &train_pool, dataset.num_classes(), scores.as_ref())?)
            }
            None => None,
        };

        let pvars = ParamVars::leaves(&params);
        let eparams = EditorParams::leaves(&cfg.editor, &editor_values, dtype);
        let parts = objective(
            model_cfg,
            &pvars,
            &batch,
            &by,
            &control,
            constraint.as_ref(),
            cfg,
            Some(&eparams),
            teacher,
        )?;
        let total_val = parts.total.value().scalar_f64()?;
        if !total_val.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("objective value {total_val}"),
            });
        }

        let mut wrt = pvars.all_vars();
        wrt.extend(eparams.vars());
        let g = flat_gradient(&parts.total, &wrt)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite outer gradient".into(),
            });
        }
        let mut theta = flatten(&params);
        if cfg.editor.alpha_trainable() {
            theta.push(editor_values.log_alpha);
        }
        if cfg.editor.beta_trainable() {
            theta.push(editor_values.raw_beta);
        }
        opt.step(&mut theta, &g);
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        params = unflatten(&params, &theta[..n_model])?;
        let mut pos = n_model;
        if cfg.editor.alpha_trainable() {
            editor_values.log_alpha = theta[pos];
            pos += 1;
        }
        if cfg.editor.beta_trainable() {
            editor_values.raw_beta = theta[pos];
        }

        let effective = editor_values.apply_to(&cfg.editor);
        records.push(TrainRecord {
            step,
            l_base: parts.l_base.value().scalar_f64()?,
            l_edit: parts.l_edit.value().scalar_f64()?,
            l_loc: parts.l_loc.value().scalar_f64()?,
            steps_taken: parts.trace.as_ref().map_or(0, |t| t.steps_taken),
            alpha: effective.alpha,
            beta: effective.beta,
            wall_ms: Some(started.elapsed().as_secs_f64() * 1e3),
        });
    }
    Ok((
        params,
        editor_values.apply_to(&cfg.editor),
        TrainLog { records },
    ))
}

/// Plain cross-entropy training, written as its own loop (no constraint
/// sampling, no edit graph, no objective assembly) so that editable training
/// with `c_edit = c_loc = 0` can be checked against it bit for bit.
pub fn train_baseline(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet, TrainLog)> {
    model_cfg.validate()?;
    cfg.validate()?;
    if dataset.train_indices().is_empty() {
        return Err(Error::Empty("train split"));
    }
    let dtype = model_cfg.dtype;
    let mut params = models::init(model_cfg, seed)?;
    if let Some(groups) = &cfg.editable_groups {
        params = params.select_editable(groups)?;
    }
    let train_pool = dataset.train_indices().to_vec();
    let steps_per_epoch = train_pool.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut batch_rng = rng::stream_rng(seed, Stream::Batch);
    let mut opt = Adam::new(flatten(&params).len(), cfg.outer_lr);
    let mut records = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let started = Instant::now();
        let idx = draw_batch(&mut batch_rng, &train_pool, cfg.batch_size);
        let (bx, by) = dataset.batch(&idx, dtype)?;
        let pvars = ParamVars::leaves(&params);
        let logits = forward(model_cfg, &pvars, &Var::constant(bx))?;
        let loss = cross_entropy(&logits, &by)?;
        let loss_val = loss.value().scalar_f64()?;
        if !loss_val.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss value {loss_val}"),
            });
        }
        let wrt = pvars.all_vars();
        let g = flat_gradient(&loss, &wrt)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let mut theta = flatten(&params);
        opt.step(&mut theta, &g);
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        params = unflatten(&params, &theta)?;
        records.push(TrainRecord {
            step,
            l_base: loss_val,
            l_edit: 0.0,
            l_loc: 0.0,
            steps_taken: 0,
            alpha: cfg.editor.alpha,
            beta: cfg.editor.beta,
            wall_ms: Some(started.elapsed().as_secs_f64() * 1e3),
        });
    }
    Ok((params, TrainLog { records }))
}
