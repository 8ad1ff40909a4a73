//! Editor functions: constrained parameter patching.
//!
//! An editor takes parameters and a constraint and applies up to k gradient
//! steps on the constraint value, stopping early once it is satisfied
//! (<= 0). Six update rules are provided. The editor can run detached
//! (plain values, used at evaluation time) or differentiable (the edited
//! parameters are a graph function of the input parameters and of the
//! trainable editor scalars, so an outer objective can backpropagate through
//! every executed step).
//!
//! Step-size parameters that are marked trainable are represented as
//! unconstrained leaves: alpha as log(alpha), beta squashed through a
//! sigmoid. Both stay in their valid ranges without projection.

use serde::{Deserialize, Serialize};

use crate::autodiff::backward::grad;
use crate::autodiff::Var;
use crate::constraints::{constraint_loss, is_satisfied, EditConstraint};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ParamSet, ParamVars};
use crate::tensor::{Dtype, Tensor};

/// Update rule of the inner optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorVariant {
    Gd,
    ScaledGd,
    Rprop,
    Rmsprop,
    Momentum,
    Adam,
}

impl EditorVariant {
    pub fn uses_beta(self) -> bool {
        matches!(self, EditorVariant::Rmsprop | EditorVariant::Adam)
    }
}

/// Editor scalar that can be optimized by the outer training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableField {
    Alpha,
    Beta,
}

fn default_beta() -> f64 {
    0.999
}
fn default_mu() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    1e-8
}

/// Editor hyperparameters. `beta` is the RMSProp/Adam second-moment decay;
/// `beta1` is Adam's first-moment decay, restricted to [0.1, 1.0]; `mu` is
/// the momentum coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorConfig {
    pub variant: EditorVariant,
    pub k: usize,
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub trainable: Vec<TrainableField>,
    /// Detach the RMSProp denominator sqrt(rms+eps) from differentiation
    /// (cost control); values unchanged, second-order terms through the
    /// denominator dropped.
    #[serde(default)]
    pub detached_denominator: bool,
    /// Momentum accumulates the step-0 gradient every step instead of the
    /// current one (the literal reading of the formula; off by default).
    #[serde(default)]
    pub momentum_uses_first_gradient: bool,
}

impl EditorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in (0, 1), got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::InvalidConfig(format!(
                "mu must be in [0, 1), got {}",
                self.mu
            )));
        }
        if !(0.1..=1.0).contains(&self.beta1) {
            return Err(Error::InvalidConfig(format!(
                "beta1 must be in [0.1, 1.0], got {}",
                self.beta1
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.trainable.contains(&TrainableField::Beta) && !self.variant.uses_beta() {
            return Err(Error::InvalidConfig(
                "trainable beta requires an rmsprop or adam editor".into(),
            ));
        }
        Ok(())
    }

    pub fn alpha_trainable(&self) -> bool {
        self.trainable.contains(&TrainableField::Alpha)
    }

    pub fn beta_trainable(&self) -> bool {
        self.trainable.contains(&TrainableField::Beta)
    }
}

/// Numeric values of the trainable editor scalars, in their unconstrained
/// parameterization. This is what the outer optimizer stores and updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditorParamValues {
    pub log_alpha: f64,
    pub raw_beta: f64,
}

impl EditorParamValues {
    pub fn from_config(cfg: &EditorConfig) -> EditorParamValues {
        EditorParamValues {
            log_alpha: cfg.alpha.ln(),
            // logit(beta): inverse of the sigmoid squash.
            raw_beta: (cfg.beta / (1.0 - cfg.beta)).ln(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> f64 {
        1.0 / (1.0 + (-self.raw_beta).exp())
    }

    /// The config with learned values written back into alpha/beta.
    pub fn apply_to(&self, cfg: &EditorConfig) -> EditorConfig {
        let mut out = cfg.clone();
        if cfg.alpha_trainable() {
            out.alpha = self.alpha();
        }
        if cfg.beta_trainable() {
            out.beta = self.beta();
        }
        out
    }
}

/// Graph leaves for the trainable editor scalars of one unroll. Present
/// only for fields the config marks trainable; fixed fields are read from
/// the config as constants.
#[derive(Debug, Clone)]
pub struct EditorParams {
    pub log_alpha: Option<Var>,
    pub raw_beta: Option<Var>,
}

impl EditorParams {
    /// Fresh leaves at the given numeric values, for the fields `cfg` marks
    /// trainable.
    pub fn leaves(cfg: &EditorConfig, values: &EditorParamValues, dtype: Dtype) -> EditorParams {
        EditorParams {
            log_alpha: cfg
                .alpha_trainable()
                .then(|| Var::leaf(Tensor::scalar(dtype, values.log_alpha))),
            raw_beta: cfg
                .beta_trainable()
                .then(|| Var::leaf(Tensor::scalar(dtype, values.raw_beta))),
        }
    }

    /// The trainable leaves in a fixed order (log_alpha, then raw_beta).
    pub fn vars(&self) -> Vec<Var> {
        self.log_alpha
            .iter()
            .chain(self.raw_beta.iter())
            .cloned()
            .collect()
    }
}

/// What one editor run did. `l_e_values[0]` is the pre-edit constraint
/// value; one more entry follows per executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub steps_taken: usize,
    pub l_e_values: Vec<f64>,
    pub satisfied: bool,
}

/// Whether an edit builds a retained graph (training) or detaches values
/// step by step (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    Detached,
    /// Keep the unroll differentiable. With `second_order` false, inner
    /// gradients are detached, so outer gradients flow only through the
    /// identity term of each update (the first-order approximation).
    Differentiable { second_order: bool },
}

/// Per-edit optimizer state. Never reused across edits.
pub struct OptState {
    rms: Option<Vec<Var>>,
    velocity: Option<Vec<Var>>,
    adam_m: Option<Vec<Var>>,
    adam_v: Option<Vec<Var>>,
    first_norm: Option<Var>,
    first_grads: Option<Vec<Var>>,
}

impl OptState {
    pub fn new() -> OptState {
        OptState {
            rms: None,
            velocity: None,
            adam_m: None,
            adam_v: None,
            first_norm: None,
            first_grads: None,
        }
    }

    /// Replace every buffer with a constant of the same value; used between
    /// detached steps so graphs do not accumulate.
    fn detach(&mut self) {
        let d = |vs: &mut Option<Vec<Var>>| {
            if let Some(vs) = vs {
                for v in vs.iter_mut() {
                    *v = Var::constant(v.value().clone());
                }
            }
        };
        d(&mut self.rms);
        d(&mut self.velocity);
        d(&mut self.adam_m);
        d(&mut self.adam_v);
        if let Some(n) = &mut self.first_norm {
            *n = Var::constant(n.value().clone());
        }
        if let Some(gs) = &mut self.first_grads {
            for g in gs.iter_mut() {
                *g = Var::constant(g.value().clone());
            }
        }
    }
}

impl Default for OptState {
    fn default() -> Self {
        Self::new()
    }
}

/// Rank-0 node for alpha: exp(log_alpha) when trainable, else a constant.
fn alpha_var(cfg: &EditorConfig, params: Option<&EditorParams>, dtype: Dtype) -> Var {
    match params.and_then(|p| p.log_alpha.as_ref()) {
        Some(la) => la.exp(),
        None => Var::scalar(dtype, cfg.alpha),
    }
}

/// Rank-0 node for beta: sigmoid(raw_beta) when trainable, else a constant.
fn beta_var(cfg: &EditorConfig, params: Option<&EditorParams>, dtype: Dtype) -> Result<Var> {
    match params.and_then(|p| p.raw_beta.as_ref()) {
        Some(rb) => rb.sigmoid(),
        None => Ok(Var::scalar(dtype, cfg.beta)),
    }
}

/// Global L2 norm over a list of gradients, as a rank-0 node.
fn global_norm(grads: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for g in grads {
        let sq = g.dot(g)?;
        total = Some(match total {
            Some(t) => t.add(&sq)?,
            None => sq,
        });
    }
    total.ok_or(Error::Empty("gradient list"))?.sqrt()
}

/// `base^(t+1)` as a graph node, by repeated multiplication (t is small).
fn pow_var(base: &Var, exponent: usize) -> Result<Var> {
    let mut out = base.clone();
    for _ in 1..exponent {
        out = out.mul(base)?;
    }
    Ok(out)
}

/// One parameter update per gradient, per the configured variant:
///
/// - gd: `alpha * g`
/// - scaled_gd: `(alpha / ||g_0||) * g`, global norm from the first step
/// - rprop: `alpha * sign(g)`
/// - rmsprop: `alpha * g / sqrt(rms_t + eps)`, `rms_0 = g_0^2`,
///   `rms_{t+1} = beta * rms_t + (1 - beta) * g^2`
/// - momentum: `v_{t+1} = alpha * g_t + mu * v_t`, update is `v_{t+1}`
/// - adam: bias-corrected first/second moments, `beta1` in [0.1, 1.0]
///
/// `t` is the zero-based step index; state must be threaded across steps of
/// one edit and never shared between edits.
pub fn step_direction(
    cfg: &EditorConfig,
    grads: &[Var],
    state: &mut OptState,
    t: usize,
    alpha: &Var,
    beta: &Var,
) -> Result<Vec<Var>> {
    if grads.is_empty() {
        return Err(Error::Empty("gradient list"));
    }
    match cfg.variant {
        EditorVariant::Gd => grads.iter().map(|g| g.scale_by(alpha)).collect(),
        EditorVariant::ScaledGd => {
            if t == 0 {
                let norm = global_norm(grads)?;
                if norm.value().scalar_f64()? == 0.0 {
                    return Err(Error::ZeroGradientNorm);
                }
                state.first_norm = Some(norm);
            }
            let norm = state.first_norm.as_ref().expect("set at step 0");
            let scale = alpha.div(norm)?;
            grads.iter().map(|g| g.scale_by(&scale)).collect()
        }
        EditorVariant::Rprop => grads.iter().map(|g| g.sign().scale_by(alpha)).collect(),
        EditorVariant::Rmsprop => {
            let one_minus_beta = beta.neg().add_const(1.0);
            let new_rms: Vec<Var> = if t == 0 {
                // Full weight on the first squared gradient.
                grads.iter().map(|g| g.mul(g)).collect::<Result<_>>()?
            } else {
                let prev = state.rms.as_ref().expect("set at step 0");
                grads
                    .iter()
                    .zip(prev)
                    .map(|(g, r)| {
                        r.scale_by(beta)?
                            .add(&g.mul(g)?.scale_by(&one_minus_beta)?)
                    })
                    .collect::<Result<_>>()?
            };
            let updates = grads
                .iter()
                .zip(&new_rms)
                .map(|(g, r)| {
                    let mut denom = r.add_const(cfg.epsilon).sqrt()?;
                    if cfg.detached_denominator {
                        denom = denom.stop_gradient();
                    }
                    g.scale_by(alpha)?.div(&denom)
                })
                .collect::<Result<_>>()?;
            state.rms = Some(new_rms);
            Ok(updates)
        }
        EditorVariant::Momentum => {
            if t == 0 && cfg.momentum_uses_first_gradient {
                state.first_grads = Some(grads.to_vec());
            }
            let effective: Vec<Var> = if cfg.momentum_uses_first_gradient {
                state.first_grads.as_ref().expect("set at step 0").clone()
            } else {
                grads.to_vec()
            };
            let new_v: Vec<Var> = match &state.velocity {
                None => effective
                    .iter()
                    .map(|g| g.scale_by(alpha))
                    .collect::<Result<_>>()?,
                Some(prev) => effective
                    .iter()
                    .zip(prev)
                    .map(|(g, v)| g.scale_by(alpha)?.add(&v.scale_const(cfg.mu)))
                    .collect::<Result<_>>()?,
            };
            state.velocity = Some(new_v.clone());
            Ok(new_v)
        }
        EditorVariant::Adam => {
            let b1 = cfg.beta1;
            let one_minus_beta = beta.neg().add_const(1.0);
            let prev_m = state.adam_m.take();
            let prev_v = state.adam_v.take();
            let mut new_m = Vec::with_capacity(grads.len());
            let mut new_v = Vec::with_capacity(grads.len());
            for (i, g) in grads.iter().enumerate() {
                let m = match &prev_m {
                    None => g.scale_const(1.0 - b1),
                    Some(pm) => pm[i].scale_const(b1).add(&g.scale_const(1.0 - b1))?,
                };
                let v = match &prev_v {
                    None => g.mul(g)?.scale_by(&one_minus_beta)?,
                    Some(pv) => pv[i]
                        .scale_by(beta)?
                        .add(&g.mul(g)?.scale_by(&one_minus_beta)?)?,
                };
                new_m.push(m);
                new_v.push(v);
            }
            // Bias corrections. beta1 is never trainable, so its correction
            // is a plain float; at beta1 = 1.0 the correction denominator is
            // 0 and m is identically 0, so the correction is skipped.
            let bc1 = 1.0 - b1.powi(t as i32 + 1);
            let bc2 = pow_var(beta, t + 1)?.neg().add_const(1.0);
            let updates = new_m
                .iter()
                .zip(&new_v)
                .map(|(m, v)| {
                    let m_hat = if bc1 == 0.0 {
                        m.clone()
                    } else {
                        m.scale_const(1.0 / bc1)
                    };
                    let v_hat = v.scale_by(&Var::scalar(v.dtype(), 1.0).div(&bc2)?)?;
                    m_hat.scale_by(alpha)?.div(&v_hat.sqrt()?.add_const(cfg.epsilon))
                })
                .collect::<Result<_>>()?;
            state.adam_m = Some(new_m);
            state.adam_v = Some(new_v);
            Ok(updates)
        }
    }
}

fn ensure_finite(step: usize, what: &'static str, vars: &[Var]) -> Result<()> {
    for v in vars {
        if !v.value().is_all_finite() {
            return Err(Error::NonFiniteInEdit { step, what });
        }
    }
    Ok(())
}

/// Replace editable nodes with fresh leaves holding the same values.
fn releaf_editable(pv: &ParamVars) -> ParamVars {
    let groups = pv
        .groups
        .iter()
        .map(|g| crate::models::GroupVars {
            name: g.name.clone(),
            editable: g.editable,
            vars: g
                .vars
                .iter()
                .map(|(n, v)| {
                    let nv = if g.editable {
                        Var::leaf(v.value().clone())
                    } else {
                        v.clone()
                    };
                    (n.clone(), nv)
                })
                .collect(),
        })
        .collect();
    ParamVars { groups }
}

/// Run the editor on graph-side parameters.
///
/// The constraint value is checked before every step (an already-satisfied
/// constraint takes zero steps) and after the last one; the trace records
/// every value seen, so `l_e_values.len() == steps_taken + 1`. Only groups
/// flagged editable are updated. In detached mode each step's results are
/// cut from the graph; in differentiable mode the returned parameters are a
/// graph function of the input parameters and of `editor_params`. The
/// early-stop decision always reads detached scalar values; control flow is
/// data-dependent but not differentiated.
pub fn edit_graph(
    model_cfg: &ModelConfig,
    params: &ParamVars,
    constraint: &EditConstraint,
    cfg: &EditorConfig,
    editor_params: Option<&EditorParams>,
    mode: EditMode,
) -> Result<(ParamVars, EditTrace)> {
    cfg.validate()?;
    let dtype = model_cfg.dtype;
    let alpha = alpha_var(cfg, editor_params, dtype);
    let beta = beta_var(cfg, editor_params, dtype)?;
    let mut current = params.clone();
    let mut state = OptState::new();
    let mut l_e_values: Vec<f64> = Vec::new();
    let mut steps = 0usize;
    loop {
        let l_e = constraint_loss(model_cfg, &current, constraint)?;
        let le_val = l_e.value().scalar_f64()?;
        if !le_val.is_finite() {
            return Err(Error::NonFiniteInEdit {
                step: steps,
                what: "constraint value",
            });
        }
        l_e_values.push(le_val);
        if is_satisfied(le_val)? || steps == cfg.k {
            break;
        }
        let editable = current.editable_vars();
        if editable.is_empty() {
            return Err(Error::Empty("editable parameters"));
        }
        let gmap = grad(&l_e, &editable)?;
        let mut grads: Vec<Var> = editable.iter().map(|v| gmap.get_or_zero(v)).collect();
        ensure_finite(steps, "gradient", &grads)?;
        if let EditMode::Differentiable { second_order: false } = mode {
            grads = grads.iter().map(|g| g.stop_gradient()).collect();
        }
        let updates = step_direction(cfg, &grads, &mut state, steps, &alpha, &beta)?;
        let new_editable: Vec<Var> = editable
            .iter()
            .zip(&updates)
            .map(|(p, u)| p.sub(u))
            .collect::<Result<_>>()?;
        ensure_finite(steps, "parameter", &new_editable)?;
        current = current.with_editable_replaced(&new_editable)?;
        if mode == EditMode::Detached {
            current = releaf_editable(&current);
            state.detach();
        }
        steps += 1;
    }
    let satisfied = is_satisfied(*l_e_values.last().expect("at least the initial value"))?;
    Ok((
        current,
        EditTrace {
            steps_taken: steps,
            l_e_values,
            satisfied,
        },
    ))
}

/// Detached convenience wrapper on plain parameter sets: returns the edited
/// copy and the trace; the input is never modified.
pub fn edit(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    constraint: &EditConstraint,
    cfg: &EditorConfig,
) -> Result<(ParamSet, EditTrace)> {
    let pv = ParamVars::edit_leaves(params);
    let (out, trace) = edit_graph(model_cfg, &pv, constraint, cfg, None, EditMode::Detached)?;
    Ok((out.snapshot()?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Competitors;
    use crate::models::{init, Activation};

    fn gd_cfg(alpha: f64, k: usize) -> EditorConfig {
        EditorConfig {
            variant: EditorVariant::Gd,
            k,
            alpha,
            beta: default_beta(),
            mu: default_mu(),
            beta1: default_beta1(),
            epsilon: default_epsilon(),
            trainable: vec![],
            detached_denominator: false,
            momentum_uses_first_gradient: false,
        }
    }

    fn desk_model(dtype: Dtype) -> (ModelConfig, ParamSet) {
        let cfg = ModelConfig {
            input_dim: 4,
            hidden_dims: vec![8],
            num_classes: 3,
            activation: Activation::Relu,
            extra_block: None,
            dtype,
        };
        let params = init(&cfg, 0).unwrap();
        (cfg, params)
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = gd_cfg(0.1, 5);
        assert!(c.validate().is_ok());
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        c = gd_cfg(0.1, 5);
        c.beta = 1.0;
        assert!(c.validate().is_err());
        c = gd_cfg(0.1, 5);
        c.mu = 1.0;
        assert!(c.validate().is_err());
        c = gd_cfg(0.1, 5);
        c.beta1 = 0.05;
        assert!(c.validate().is_err());
        c = gd_cfg(0.1, 5);
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        c = gd_cfg(0.1, 5);
        c.trainable = vec![TrainableField::Beta];
        assert!(c.validate().is_err(), "beta is not a gd parameter");
        c.variant = EditorVariant::Rmsprop;
        assert!(c.validate().is_ok());
    }

    fn leaf_grads(vals: &[&[f64]]) -> Vec<Var> {
        vals.iter()
            .map(|v| Var::leaf(Tensor::vector(Dtype::F64, v)))
            .collect()
    }

    #[test]
    fn rprop_update_is_alpha_times_sign() {
        let cfg = EditorConfig {
            variant: EditorVariant::Rprop,
            ..gd_cfg(0.1, 5)
        };
        let grads = leaf_grads(&[&[0.5, -2.0, 0.0]]);
        let mut state = OptState::new();
        let alpha = Var::scalar(Dtype::F64, 0.1);
        let beta = Var::scalar(Dtype::F64, cfg.beta);
        let u = step_direction(&cfg, &grads, &mut state, 0, &alpha, &beta).unwrap();
        assert_eq!(u[0].value().to_f64_vec(), vec![0.1, -0.1, 0.0]);
    }

    #[test]
    fn rmsprop_first_step_moves_each_coordinate_by_alpha() {
        // rms_0 = g^2, so g / sqrt(g^2 + eps) -> sign(g) as eps -> 0.
        let cfg = EditorConfig {
            variant: EditorVariant::Rmsprop,
            epsilon: 1e-30,
            ..gd_cfg(0.05, 5)
        };
        let grads = leaf_grads(&[&[0.5, -2.0, 3.0]]);
        let mut state = OptState::new();
        let alpha = Var::scalar(Dtype::F64, 0.05);
        let beta = Var::scalar(Dtype::F64, cfg.beta);
        let u = step_direction(&cfg, &grads, &mut state, 0, &alpha, &beta).unwrap();
        for (got, g) in u[0].value().to_f64_vec().iter().zip([0.5f64, -2.0, 3.0]) {
            assert!((got - 0.05 * g.signum()).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsprop_accumulator_follows_the_decay_recurrence() {
        let cfg = EditorConfig {
            variant: EditorVariant::Rmsprop,
            beta: 0.5,
            epsilon: 1e-12,
            ..gd_cfg(1.0, 5)
        };
        let alpha = Var::scalar(Dtype::F64, 1.0);
        let beta = Var::scalar(Dtype::F64, 0.5);
        let mut state = OptState::new();
        let g0 = leaf_grads(&[&[2.0]]);
        step_direction(&cfg, &g0, &mut state, 0, &alpha, &beta).unwrap();
        // rms_0 = 4; step 1 with g = 1: rms_1 = 0.5*4 + 0.5*1 = 2.5.
        let g1 = leaf_grads(&[&[1.0]]);
        let u = step_direction(&cfg, &g1, &mut state, 1, &alpha, &beta).unwrap();
        let want = 1.0 / 2.5f64.sqrt();
        assert!((u[0].value().get_f64(0) - want).abs() < 1e-9);
    }

    #[test]
    fn momentum_accumulates_geometrically() {
        let cfg = EditorConfig {
            variant: EditorVariant::Momentum,
            mu: 0.9,
            ..gd_cfg(0.1, 5)
        };
        let alpha = Var::scalar(Dtype::F64, 0.1);
        let beta = Var::scalar(Dtype::F64, cfg.beta);
        let mut state = OptState::new();
        let g = leaf_grads(&[&[1.0, -2.0]]);
        let u1 = step_direction(&cfg, &g, &mut state, 0, &alpha, &beta).unwrap();
        assert_eq!(u1[0].value().to_f64_vec(), vec![0.1, -0.2]);
        let u2 = step_direction(&cfg, &g, &mut state, 1, &alpha, &beta).unwrap();
        // Second update with constant gradient: alpha*g*(1 + mu).
        for (got, want) in u2[0]
            .value()
            .to_f64_vec()
            .iter()
            .zip([0.1 * 1.9, -0.2 * 1.9])
        {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_gd_divides_by_the_first_global_norm() {
        let cfg = EditorConfig {
            variant: EditorVariant::ScaledGd,
            ..gd_cfg(0.5, 5)
        };
        let alpha = Var::scalar(Dtype::F64, 0.5);
        let beta = Var::scalar(Dtype::F64, cfg.beta);
        let mut state = OptState::new();
        let g0 = leaf_grads(&[&[3.0], &[4.0]]);
        let u0 = step_direction(&cfg, &g0, &mut state, 0, &alpha, &beta).unwrap();
        // ||g_0|| = 5; updates are (0.5/5) * g.
        assert!((u0[0].value().get_f64(0) - 0.3).abs() < 1e-12);
        assert!((u0[1].value().get_f64(0) - 0.4).abs() < 1e-12);
        // Later steps reuse the first norm.
        let g1 = leaf_grads(&[&[10.0], &[0.0]]);
        let u1 = step_direction(&cfg, &g1, &mut state, 1, &alpha, &beta).unwrap();
        assert!((u1[0].value().get_f64(0) - 1.0).abs() < 1e-12);

        let zero = leaf_grads(&[&[0.0, 0.0]]);
        let mut s2 = OptState::new();
        assert!(matches!(
            step_direction(&cfg, &zero, &mut s2, 0, &alpha, &beta),
            Err(Error::ZeroGradientNorm)
        ));
    }

    #[test]
    fn adam_first_step_is_signlike_and_beta1_one_is_guarded() {
        let mut cfg = EditorConfig {
            variant: EditorVariant::Adam,
            beta: 0.999,
            beta1: 0.9,
            epsilon: 1e-12,
            ..gd_cfg(0.05, 5)
        };
        let alpha = Var::scalar(Dtype::F64, 0.05);
        let beta = Var::scalar(Dtype::F64, cfg.beta);
        let mut state = OptState::new();
        let g = leaf_grads(&[&[0.5, -2.0]]);
        let u = step_direction(&cfg, &g, &mut state, 0, &alpha, &beta).unwrap();
        // After bias correction the first Adam step is alpha * sign(g).
        for (got, gv) in u[0].value().to_f64_vec().iter().zip([0.5f64, -2.0]) {
            assert!((got - 0.05 * gv.signum()).abs() < 1e-6, "got {got}");
        }
        // beta1 = 1.0: the first moment stays zero and the correction is
        // skipped rather than dividing 0 by 0.
        cfg.beta1 = 1.0;
        let mut s2 = OptState::new();
        let u2 = step_direction(&cfg, &g, &mut s2, 0, &alpha, &beta).unwrap();
        assert_eq!(u2[0].value().to_f64_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn k_zero_is_an_exact_identity() {
        let (mcfg, params) = desk_model(Dtype::F64);
        let x = Tensor::vector(Dtype::F64, &[0.3, -0.1, 0.7, 0.2]);
        let c = EditConstraint::new(x, 1, Competitors::AllOther).unwrap();
        let (edited, trace) = edit(&mcfg, &params, &c, &gd_cfg(0.5, 0)).unwrap();
        assert_eq!(edited, params);
        assert_eq!(trace.steps_taken, 0);
        assert_eq!(trace.l_e_values.len(), 1);
    }

    #[test]
    fn already_satisfied_constraint_takes_zero_steps() {
        let (mcfg, params) = desk_model(Dtype::F64);
        let x = Tensor::vector(Dtype::F64, &[0.3, -0.1, 0.7, 0.2]);
        // Ask for whatever the model already predicts.
        let pv = ParamVars::constants(&params);
        let logits = crate::models::forward(
            &mcfg,
            &pv,
            &Var::constant(x.reshape(vec![1, 4]).unwrap()),
        )
        .unwrap();
        let y = logits.value().argmax_rows().unwrap()[0];
        let c = EditConstraint::new(x, y, Competitors::AllOther).unwrap();
        let (edited, trace) = edit(&mcfg, &params, &c, &gd_cfg(0.5, 10)).unwrap();
        assert_eq!(edited, params);
        assert_eq!(trace.steps_taken, 0);
        assert!(trace.satisfied);
        assert!(trace.l_e_values[0] <= 0.0);
    }

    /// Independent oracle for head-only GD edits: with frozen hidden layers
    /// and all-other competitors on a 2-class head, the margin is linear in
    /// the head parameters, so each GD step lowers it by exactly
    /// alpha * (2 ||h||^2 + 2). Predicts the step count in closed form.
    #[test]
    fn gd_head_edit_matches_closed_form_step_count() {
        let mcfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![5],
            num_classes: 2,
            activation: Activation::Relu,
            extra_block: None,
            dtype: Dtype::F64,
        };
        let params = init(&mcfg, 7).unwrap().select_editable(&["head"]).unwrap();
        let xv = [0.9, -0.4, 1.3];
        let x = Tensor::vector(Dtype::F64, &xv);

        // Plain-f64 recomputation of the hidden representation.
        let w0 = params.group("layer_0").unwrap().tensors[0].value.to_f64_vec();
        let b0 = params.group("layer_0").unwrap().tensors[1].value.to_f64_vec();
        let mut h = vec![0.0f64; 5];
        for j in 0..5 {
            let mut acc = b0[j];
            for (i, xi) in xv.iter().enumerate() {
                acc += xi * w0[i * 5 + j];
            }
            h[j] = acc.max(0.0);
        }
        // Initial margin for y_ref = 1 against class 0, from head params.
        let wh = params.group("head").unwrap().tensors[0].value.to_f64_vec();
        let bh = params.group("head").unwrap().tensors[1].value.to_f64_vec();
        let logit = |c: usize| -> f64 {
            bh[c] + (0..5).map(|j| h[j] * wh[j * 2 + c]).sum::<f64>()
        };
        let le0 = logit(0) - logit(1);
        let y_ref = if le0 > 0.0 { 1 } else { 0 };
        let le0 = le0.abs();
        assert!(le0 > 0.0, "degenerate init");

        // Closed form: per-step decrease alpha * (2 ||h||^2 + 2); brute-force
        // line search over alpha confirms feasibility within k = 10.
        let hs: f64 = h.iter().map(|v| v * v).sum();
        let per_unit = 2.0 * hs + 2.0;
        let alphas = [1e-4, 1e-3, 1e-2, 0.1, 0.5];
        let feasible: Vec<(f64, usize)> = alphas
            .iter()
            .filter_map(|&a| {
                let n = (le0 / (a * per_unit)).ceil() as usize;
                // Exact tie counts as satisfied; ceil handles the boundary.
                (n <= 10 && n >= 1).then_some((a, n))
            })
            .collect();
        assert!(!feasible.is_empty(), "line search found no workable alpha");

        for (a, want_steps) in feasible {
            let c =
                EditConstraint::new(x.clone(), y_ref, Competitors::AllOther).unwrap();
            let (edited, trace) = edit(&mcfg, &params, &c, &gd_cfg(a, 10)).unwrap();
            assert!(trace.satisfied, "alpha {a}");
            assert_eq!(trace.steps_taken, want_steps, "alpha {a}");
            assert!(*trace.l_e_values.last().unwrap() <= 0.0);
            assert_eq!(trace.l_e_values.len(), trace.steps_taken + 1);
            // Non-head groups are untouched, bit for bit.
            for g in ["layer_0"] {
                assert_eq!(edited.group(g).unwrap(), params.group(g).unwrap());
            }
            // Re-evaluating the constraint on the edited params agrees.
            let le = constraint_loss(&mcfg, &ParamVars::constants(&edited), &c)
                .unwrap()
                .value()
                .scalar_f64()
                .unwrap();
            assert!(le <= 1e-9, "post-edit l_e {le}");
        }
    }

    #[test]
    fn non_finite_parameters_error_with_step_index() {
        let (mcfg, params) = desk_model(Dtype::F64);
        let x = Tensor::vector(Dtype::F64, &[0.3, -0.1, 0.7, 0.2]);
        let pv = ParamVars::constants(&params);
        let logits = crate::models::forward(
            &mcfg,
            &pv,
            &Var::constant(x.reshape(vec![1, 4]).unwrap()),
        )
        .unwrap();
        let y = logits.value().argmax_rows().unwrap()[0];
        let wrong = (y + 1) % 3;
        let c = EditConstraint::new(x, wrong, Competitors::AllOther).unwrap();
        // A gigantic step makes the first update non-finite downstream: the
        // margin is linear in the head, so l_e goes to -inf at step 1.
        let res = edit(&mcfg, &params, &c, &gd_cfg(1e300, 10));
        match res {
            Err(Error::NonFiniteInEdit { step, .. }) => assert!(step <= 1),
            other => panic!("expected a non-finite edit error, got {other:?}"),
        }
    }

    #[test]
    fn trainable_alpha_gradient_matches_finite_differences() {
        // Outer objective: post-edit constraint value after a 3-step
        // differentiable GD unroll. Differentiates w.r.t. log(alpha).
        let mcfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            num_classes: 3,
            activation: Activation::Tanh,
            extra_block: None,
            dtype: Dtype::F64,
        };
        let params = init(&mcfg, 1).unwrap().select_editable(&["head"]).unwrap();
        let x = Tensor::vector(Dtype::F64, &[0.5, -0.2, 0.8]);
        let pv0 = ParamVars::constants(&params);
        let logits = crate::models::forward(
            &mcfg,
            &pv0,
            &Var::constant(x.reshape(vec![1, 3]).unwrap()),
        )
        .unwrap();
        let y = logits.value().argmax_rows().unwrap()[0];
        let target = (y + 1) % 3;
        let c = EditConstraint::new(x, target, Competitors::AllOther).unwrap();
        // Alpha small enough that 3 steps never satisfy: stable step count.
        let mut cfg = gd_cfg(1e-3, 3);
        cfg.trainable = vec![TrainableField::Alpha];
        let values = EditorParamValues::from_config(&cfg);

        let run = |log_alpha: f64| -> (f64, Option<f64>) {
            let ep = EditorParams {
                log_alpha: Some(Var::leaf(Tensor::scalar(Dtype::F64, log_alpha))),
                raw_beta: None,
            };
            let pv = ParamVars::edit_leaves(&params);
            let (edited, trace) = edit_graph(
                &mcfg,
                &pv,
                &c,
                &cfg,
                Some(&ep),
                EditMode::Differentiable { second_order: true },
            )
            .unwrap();
            assert_eq!(trace.steps_taken, 3);
            let le = constraint_loss(&mcfg, &edited, &c).unwrap();
            let val = le.value().scalar_f64().unwrap();
            let la = ep.log_alpha.as_ref().unwrap();
            let g = grad(&le, &[la.clone()])
                .unwrap()
                .get(la)
                .map(|v| v.value().scalar_f64().unwrap());
            (val, g)
        };
        let (_, analytic) = run(values.log_alpha);
        let analytic = analytic.expect("alpha reachable from the unrolled edit");
        let h = 1e-5;
        let (fp, _) = run(values.log_alpha + h);
        let (fm, _) = run(values.log_alpha - h);
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn editor_param_values_round_trip_through_squash() {
        let mut cfg = gd_cfg(0.05, 5);
        cfg.variant = EditorVariant::Rmsprop;
        cfg.beta = 0.97;
        cfg.trainable = vec![TrainableField::Alpha, TrainableField::Beta];
        let v = EditorParamValues::from_config(&cfg);
        assert!((v.alpha() - 0.05).abs() < 1e-12);
        assert!((v.beta() - 0.97).abs() < 1e-12);
        let back = v.apply_to(&cfg);
        assert!((back.alpha - 0.05).abs() < 1e-12);
        assert!((back.beta - 0.97).abs() < 1e-12);
    }
}
