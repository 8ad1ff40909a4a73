//! Measurement harness for edited models.
//!
//! Every edit here is independent and detached: it starts from the same
//! base parameters and never builds training graphs. The headline metrics
//! per batch of edits are:
//!
//! - drawdown: mean absolute change of control-set classification error,
//!   with the signed mean reported alongside;
//! - success rate: fraction of edits whose constraint is satisfied within
//!   the step budget;
//! - mean steps: over all edits (a failed edit counts its full budget) and
//!   over successful edits only.
//!
//! Deeper diagnostics: a per-class confusion drawdown matrix, a per-sample
//! KL descriptor matrix with its explained-variance spectrum, cumulative
//! (sequential) edit curves, and paired generalization probes. Independent
//! edits are evaluated in parallel when the `parallel` feature is on;
//! results are merged in edit-index order, so reports are byte-identical
//! regardless of worker count.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::constraints::EditConstraint;
use crate::editors::{edit, EditTrace, EditorConfig};
use crate::error::{Error, Result};
use crate::models::{forward, ModelConfig, ParamSet, ParamVars};
use crate::rng::{self, Stream};
use crate::tensor::{Dtype, Tensor};

/// Run `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    (0..n).map(f).collect()
}

/// Labeled samples the edits are judged against.
#[derive(Debug, Clone, Copy)]
pub struct ControlSet<'a> {
    /// Feature matrix [M, d]; cast to the model dtype internally.
    pub features: &'a Tensor,
    pub labels: &'a [usize],
}

impl<'a> ControlSet<'a> {
    pub fn new(features: &'a Tensor, labels: &'a [usize]) -> Result<ControlSet<'a>> {
        if features.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "ControlSet::new",
                shape: features.shape().to_vec(),
                detail: "expected [M, d]".into(),
            });
        }
        if features.shape()[0] == 0 {
            return Err(Error::Empty("control set"));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "ControlSet::new",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(ControlSet { features, labels })
    }
}

/// Extra evaluation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Drop control rows bit-equal to the edit input when scoring that
    /// edit, so the requested change itself is not counted as damage.
    #[serde(default)]
    pub exclude_edited_input: bool,
}

/// One edit's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerEditRecord {
    pub index: usize,
    pub y_ref: usize,
    /// Class the base model predicted for the edit input.
    pub pre_edit_prediction: usize,
    pub trace: EditTrace,
    pub error_after: f64,
    /// Signed control-error change of this edit.
    pub error_change: f64,
}

/// Aggregate metrics over a batch of independent edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvalReport {
    pub n_edits: usize,
    pub base_error: f64,
    /// Mean absolute control-error change.
    pub mean_drawdown: f64,
    /// Mean signed control-error change (diagnostic companion).
    pub mean_drawdown_signed: f64,
    pub success_rate: f64,
    /// Mean editor steps over all edits; a failed edit counts its full k.
    pub mean_steps: f64,
    /// Mean steps over successful edits only; absent when none succeeded.
    pub mean_steps_success: Option<f64>,
    pub per_edit: Vec<PerEditRecord>,
    /// Row a: mean per-class error change (column = class) over edits whose
    /// pre-edit predicted class was a. Rows for classes never seen as a
    /// pre-edit prediction are all zero.
    pub confusion_drawdown: Vec<Vec<f64>>,
    pub editable_groups: Vec<String>,
}

fn predictions(model_cfg: &ModelConfig, params: &ParamSet, x: &Tensor) -> Result<Vec<usize>> {
    let pv = ParamVars::constants(params);
    let logits = forward(model_cfg, &pv, &Var::constant(x.clone()))?;
    logits.value().argmax_rows()
}

fn logits_matrix(model_cfg: &ModelConfig, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let pv = ParamVars::constants(params);
    Ok(forward(model_cfg, &pv, &Var::constant(x.clone()))?.value().clone())
}

/// Per-class error fractions: entry c is the error rate over samples
/// labeled c (0 when the class has no samples).
fn per_class_error(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut wrong = vec![0usize; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        count[y] += 1;
        if p != y {
            wrong[y] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            if count[c] == 0 {
                0.0
            } else {
                wrong[c] as f64 / count[c] as f64
            }
        })
        .collect()
}

fn error_rate(preds: &[usize], labels: &[usize]) -> f64 {
    let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    wrong as f64 / labels.len() as f64
}

/// Constraint with its input cast to the model dtype.
fn cast_constraint(c: &EditConstraint, dtype: Dtype) -> Result<EditConstraint> {
    EditConstraint::new(c.x.cast(dtype), c.y_ref, c.competitors.clone())
}

/// Control rows bit-equal to `x` (used by the exclusion option).
fn rows_equal_to(features: &Tensor, x: &Tensor) -> Vec<usize> {
    let d = features.shape()[1];
    let m = features.shape()[0];
    let f = features.to_f64_vec();
    let xv = x.to_f64_vec();
    (0..m)
        .filter(|&i| f[i * d..(i + 1) * d] == xv[..])
        .collect()
}

struct EditOutcome {
    record: PerEditRecord,
    per_class_after: Vec<f64>,
}

/// Evaluate a batch of independent edits: each starts from `params`, runs
/// the detached editor, and is scored on the control set. Aggregation is
/// sequential in edit-index order, so the report is identical no matter how
/// many workers ran the edits.
pub fn evaluate_edits(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    edits: &[EditConstraint],
    editor_cfg: &EditorConfig,
    control: ControlSet<'_>,
    options: EvalOptions,
) -> Result<EditEvalReport> {
    model_cfg.validate()?;
    editor_cfg.validate()?;
    if edits.is_empty() {
        return Err(Error::Empty("edit set"));
    }
    let dtype = model_cfg.dtype;
    let num_classes = model_cfg.num_classes;
    let cx = control.features.cast(dtype);
    let cy = control.labels;

    let base_preds = predictions(model_cfg, params, &cx)?;
    let base_error = error_rate(&base_preds, cy);
    let per_class_before = per_class_error(&base_preds, cy, num_classes);

    let outcomes: Vec<EditOutcome> = map_indexed(edits.len(), |i| {
        let constraint = cast_constraint(&edits[i], dtype)?;
        let pre_edit_prediction =
            predictions(model_cfg, params, &constraint.x.reshape(vec![1, constraint.x.numel()])?)?[0];
        let (edited, trace) = edit(model_cfg, params, &constraint, editor_cfg)?;
        let preds_after = predictions(model_cfg, &edited, &cx)?;
        let per_class_after = per_class_error(&preds_after, cy, num_classes);

        let (before_i, after_i) = if options.exclude_edited_input {
            let excluded = rows_equal_to(&cx, &constraint.x);
            let keep: Vec<usize> = (0..cy.len()).filter(|j| !excluded.contains(j)).collect();
            if keep.is_empty() {
                return Err(Error::Empty("control set after exclusion"));
            }
            let sub = |preds: &[usize]| {
                let p: Vec<usize> = keep.iter().map(|&j| preds[j]).collect();
                let y: Vec<usize> = keep.iter().map(|&j| cy[j]).collect();
                error_rate(&p, &y)
            };
            (sub(&base_preds), sub(&preds_after))
        } else {
            (base_error, error_rate(&preds_after, cy))
        };

        Ok(EditOutcome {
            record: PerEditRecord {
                index: i,
                y_ref: constraint.y_ref,
                pre_edit_prediction,
                trace,
                error_after: after_i,
                error_change: after_i - before_i,
            },
            per_class_after,
        })
    })?;

    let n = edits.len() as f64;
    let mut abs_sum = 0.0;
    let mut signed_sum = 0.0;
    let mut steps_sum = 0usize;
    let mut success_steps = 0usize;
    let mut successes = 0usize;
    let mut conf_sum = vec![vec![0.0f64; num_classes]; num_classes];
    let mut conf_count = vec![0usize; num_classes];
    for o in &outcomes {
        abs_sum += o.record.error_change.abs();
        signed_sum += o.record.error_change;
        steps_sum += o.record.trace.steps_taken;
        if o.record.trace.satisfied {
            successes += 1;
            success_steps += o.record.trace.steps_taken;
        }
        let row = o.record.pre_edit_prediction;
        conf_count[row] += 1;
        for c in 0..num_classes {
            conf_sum[row][c] += o.per_class_after[c] - per_class_before[c];
        }
    }
    let confusion_drawdown: Vec<Vec<f64>> = conf_sum
        .into_iter()
        .enumerate()
        .map(|(row, sums)| {
            if conf_count[row] == 0 {
                sums
            } else {
                sums.into_iter().map(|s| s / conf_count[row] as f64).collect()
            }
        })
        .collect();

    Ok(EditEvalReport {
        n_edits: edits.len(),
        base_error,
        mean_drawdown: abs_sum / n,
        mean_drawdown_signed: signed_sum / n,
        success_rate: successes as f64 / n,
        mean_steps: steps_sum as f64 / n,
        mean_steps_success: (successes > 0).then(|| success_steps as f64 / successes as f64),
        per_edit: outcomes.into_iter().map(|o| o.record).collect(),
        confusion_drawdown,
        editable_groups: params.editable().to_vec(),
    })
}

/// Error curve of cumulative edits: each edit starts from the previous
/// edited parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialEvalOutcome {
    /// Control error after 0..=N edits (length N + 1).
    pub error_curve: Vec<f64>,
    /// Whether each edit's constraint was satisfied (length N).
    pub success: Vec<bool>,
}

pub fn sequential_edit_eval(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    edits: &[EditConstraint],
    editor_cfg: &EditorConfig,
    control: ControlSet<'_>,
) -> Result<SequentialEvalOutcome> {
    model_cfg.validate()?;
    editor_cfg.validate()?;
    let dtype = model_cfg.dtype;
    let cx = control.features.cast(dtype);
    let mut current = params.clone();
    let mut error_curve =
        vec![error_rate(&predictions(model_cfg, &current, &cx)?, control.labels)];
    let mut success = Vec::with_capacity(edits.len());
    for c in edits {
        let constraint = cast_constraint(c, dtype)?;
        let (next, trace) = edit(model_cfg, &current, &constraint, editor_cfg)?;
        current = next;
        success.push(trace.satisfied);
        error_curve.push(error_rate(
            &predictions(model_cfg, &current, &cx)?,
            control.labels,
        ));
    }
    Ok(SequentialEvalOutcome {
        error_curve,
        success,
    })
}

// ---- descriptor matrix and its spectrum ------------------------------------------

/// Per-sample KL divergences between pre- and post-edit predictions: entry
/// (i, j) is KL(pre || post-edit-i) on control sample j. Rows are edits.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    /// Rank-2 f32 tensor [N_edits, M_control].
    pub matrix: Tensor,
}

impl DescriptorMatrix {
    pub fn n_edits(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn m_control(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Row-wise softmax probabilities and log-probabilities, computed in f64
/// with a max shift.
fn softmax_rows(logits: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, c) = (logits.shape()[0], logits.shape()[1]);
    let v = logits.to_f64_vec();
    let mut p = vec![0.0; m * c];
    let mut log_p = vec![0.0; m * c];
    for i in 0..m {
        let row = &v[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let log_z = z.ln();
        for j in 0..c {
            p[i * c + j] = exps[j] / z;
            log_p[i * c + j] = row[j] - mx - log_z;
        }
    }
    (p, log_p)
}

pub fn descriptor_matrix(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    edits: &[EditConstraint],
    editor_cfg: &EditorConfig,
    control_features: &Tensor,
) -> Result<DescriptorMatrix> {
    model_cfg.validate()?;
    editor_cfg.validate()?;
    if edits.is_empty() {
        return Err(Error::Empty("edit set"));
    }
    if control_features.shape().len() != 2 || control_features.shape()[0] == 0 {
        return Err(Error::Empty("control set"));
    }
    let dtype = model_cfg.dtype;
    let cx = control_features.cast(dtype);
    let m = cx.shape()[0];
    let c = model_cfg.num_classes;
    let (p_pre, logp_pre) = softmax_rows(&logits_matrix(model_cfg, params, &cx)?);

    let rows: Vec<Vec<f32>> = map_indexed(edits.len(), |i| {
        let constraint = cast_constraint(&edits[i], dtype)?;
        let (edited, _) = edit(model_cfg, params, &constraint, editor_cfg)?;
        let (_, logq) = softmax_rows(&logits_matrix(model_cfg, &edited, &cx)?);
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            let mut kl = 0.0;
            for t in 0..c {
                kl += p_pre[j * c + t] * (logp_pre[j * c + t] - logq[j * c + t]);
            }
            // Exact KL is non-negative; clamp float residue from the
            // subtraction of nearly equal log-probabilities.
            row.push(kl.max(0.0) as f32);
        }
        Ok(row)
    })?;

    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Ok(DescriptorMatrix {
        matrix: Tensor::from_f32(vec![edits.len(), m], flat)?,
    })
}

/// Cumulative explained-variance ratios of the column-mean-centered matrix:
/// entry r is the fraction of total variance captured by the top r + 1
/// singular directions. Non-decreasing; reaches 1 at full rank.
pub fn explained_variance(matrix: &Tensor, max_components: usize) -> Result<Vec<f64>> {
    if matrix.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "explained_variance",
            shape: matrix.shape().to_vec(),
            detail: "expected rank 2".into(),
        });
    }
    if max_components == 0 {
        return Err(Error::InvalidConfig(
            "max_components must be positive".into(),
        ));
    }
    let (n, m) = (matrix.shape()[0], matrix.shape()[1]);
    if n == 0 || m == 0 {
        return Err(Error::Empty("descriptor matrix"));
    }
    let v = matrix.to_f64_vec();
    let mut centered = v.clone();
    for j in 0..m {
        let mean: f64 = (0..n).map(|i| v[i * m + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * m + j] -= mean;
        }
    }
    if centered.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateMatrix);
    }
    let dm = nalgebra::DMatrix::from_row_slice(n, m, &centered);
    let mut sv: Vec<f64> = dm.svd(false, false).singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut out = Vec::new();
    let mut acc = 0.0;
    for s in sv.iter().take(max_components) {
        acc += s * s;
        out.push(acc / total);
    }
    Ok(out)
}

// ---- paired generalization ---------------------------------------------------------

/// An edit input together with a held-out probe that should move with it.
#[derive(Debug, Clone, PartialEq)]
pub struct EditProbePair {
    pub edit_x: Tensor,
    pub probe_x: Tensor,
    pub y_ref: usize,
}

/// For each pair: edit the model toward `y_ref` on `edit_x` (independently,
/// from the base parameters), then check whether `probe_x` is classified as
/// `y_ref`. Returns the success fraction.
pub fn paired_generalization_eval(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    pairs: &[EditProbePair],
    editor_cfg: &EditorConfig,
) -> Result<f64> {
    model_cfg.validate()?;
    editor_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("probe pairs"));
    }
    let dtype = model_cfg.dtype;
    let hits: Vec<bool> = map_indexed(pairs.len(), |i| {
        let pair = &pairs[i];
        let constraint = EditConstraint::new(
            pair.edit_x.cast(dtype),
            pair.y_ref,
            crate::constraints::Competitors::AllOther,
        )?;
        let (edited, _) = edit(model_cfg, params, &constraint, editor_cfg)?;
        let d = pair.probe_x.numel();
        let probe = pair.probe_x.cast(dtype).reshape(vec![1, d])?;
        let pred = predictions(model_cfg, &edited, &probe)?[0];
        Ok(pred == pair.y_ref)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64)
}

/// Generate perturbed-twin pairs: a base row is drawn from `candidates`,
/// and the edit and probe inputs are that row plus independent Gaussian
/// noise of scale `sigma`. Target classes are uniform. Deterministic per
/// seed; the draw order (row, target, edit noise, probe noise) is part of
/// the contract.
pub fn twin_pairs(
    features: &Tensor,
    candidates: &[usize],
    num_classes: usize,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<EditProbePair>> {
    if candidates.is_empty() {
        return Err(Error::Empty("twin-pair candidates"));
    }
    if count == 0 {
        return Err(Error::Empty("twin-pair count"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be non-negative and finite, got {sigma}"
        )));
    }
    let d = features.shape()[1];
    let mut rng = rng::stream_rng(seed, Stream::EvalEdits);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let row = candidates[rng::below(&mut rng, candidates.len())];
        let y_ref = rng::below(&mut rng, num_classes);
        let base = features.gather_rows(&[row])?.to_f64_vec();
        let noisy = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Tensor> {
            let v: Vec<f64> = base.iter().map(|&x| x + sigma * rng::normal(rng)).collect();
            Ok(Tensor::from_f64(vec![d], v)?.cast(features.dtype()))
        };
        let edit_x = noisy(&mut rng)?;
        let probe_x = noisy(&mut rng)?;
        pairs.push(EditProbePair {
            edit_x,
            probe_x,
            y_ref,
        });
    }
    Ok(pairs)
}

// ---- editor hyperparameter tuning ---------------------------------------------------

/// Success rate a tuning candidate must reach to be considered.
pub const TUNE_SUCCESS_THRESHOLD: f64 = 0.95;
/// Step budget every candidate is evaluated at.
pub const TUNE_K: usize = 10;

/// One grid entry: an editor configuration plus, optionally, the parameter
/// groups it is allowed to edit (defaults to the base parameters' mask).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneCandidate {
    pub editor: EditorConfig,
    #[serde(default)]
    pub editable_groups: Option<Vec<String>>,
}

/// Metrics of one candidate at the tuning budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub candidate: TuneCandidate,
    pub success_rate: f64,
    pub mean_drawdown: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub outcomes: Vec<CandidateOutcome>,
    /// Index of the selected candidate in the grid.
    pub chosen: usize,
    pub required_success_rate: f64,
    pub k: usize,
}

/// Grid-search editor hyperparameters: every candidate is scored at a step
/// budget of [`TUNE_K`] on the tuning edits; among candidates whose success
/// rate reaches [`TUNE_SUCCESS_THRESHOLD`], the one with the smallest mean
/// drawdown wins, ties broken by grid order. The returned candidate carries
/// k = [`TUNE_K`].
pub fn tune_editor(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    tuning_edits: &[EditConstraint],
    control: ControlSet<'_>,
    grid: &[TuneCandidate],
) -> Result<(TuneCandidate, TuneReport)> {
    if grid.is_empty() {
        return Err(Error::Empty("tuning grid"));
    }
    let mut outcomes: Vec<CandidateOutcome> = Vec::with_capacity(grid.len());
    let mut best: Option<usize> = None;
    let mut best_rate = 0.0f64;
    for (gi, candidate) in grid.iter().enumerate() {
        let mut editor = candidate.editor.clone();
        editor.k = TUNE_K;
        let masked = match &candidate.editable_groups {
            Some(groups) => params.select_editable(groups)?,
            None => params.clone(),
        };
        let report = evaluate_edits(
            model_cfg,
            &masked,
            tuning_edits,
            &editor,
            control,
            EvalOptions::default(),
        )?;
        let feasible = report.success_rate >= TUNE_SUCCESS_THRESHOLD;
        best_rate = best_rate.max(report.success_rate);
        if feasible {
            let better = match best {
                None => true,
                Some(b) => report.mean_drawdown < outcomes[b].mean_drawdown,
            };
            if better {
                best = Some(gi);
            }
        }
        outcomes.push(CandidateOutcome {
            candidate: TuneCandidate {
                editor,
                editable_groups: candidate.editable_groups.clone(),
            },
            success_rate: report.success_rate,
            mean_drawdown: report.mean_drawdown,
            feasible,
        });
    }
    let Some(chosen) = best else {
        return Err(Error::InfeasibleGrid { best_rate });
    };
    let winner = outcomes[chosen].candidate.clone();
    Ok((
        winner,
        TuneReport {
            outcomes,
            chosen,
            required_success_rate: TUNE_SUCCESS_THRESHOLD,
            k: TUNE_K,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Competitors;
    use crate::data_io::gen_blobs;
    use crate::models::{init, Activation};

    fn desk() -> (ModelConfig, ParamSet, crate::data_io::Dataset) {
        let model_cfg = ModelConfig {
            input_dim: 4,
            hidden_dims: vec![8],
            num_classes: 3,
            activation: Activation::Tanh,
            extra_block: None,
            dtype: Dtype::F32,
        };
        let params = init(&model_cfg, 17).unwrap().select_editable(&["head"]).unwrap();
        let ds = gen_blobs(3, 40, 4, 0.6, 5).unwrap().split_random(90, 5).unwrap();
        (model_cfg, params, ds)
    }

    fn gd(alpha: f64, k: usize) -> EditorConfig {
        serde_json::from_value(serde_json::json!({"variant": "gd", "k": k, "alpha": alpha}))
            .unwrap()
    }

    fn make_edits(ds: &crate::data_io::Dataset, rows: &[usize]) -> Vec<EditConstraint> {
        rows.iter()
            .map(|&r| {
                let x = ds.features().gather_rows(&[r]).unwrap().reshape(vec![4]).unwrap();
                let y_ref = (ds.labels()[r] + 1) % 3;
                EditConstraint::new(x, y_ref, Competitors::AllOther).unwrap()
            })
            .collect()
    }

    fn control(ds: &crate::data_io::Dataset) -> (Tensor, Vec<usize>) {
        let idx = ds.test_indices();
        let x = ds.features().gather_rows(idx).unwrap();
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
        (x, y)
    }

    #[test]
    fn zero_budget_edits_change_nothing() {
        let (model_cfg, params, ds) = desk();
        let edits = make_edits(&ds, &[0, 3, 7, 11, 20]);
        let (cx, cy) = control(&ds);
        let cs = ControlSet::new(&cx, &cy).unwrap();
        let report = evaluate_edits(&model_cfg, &params, &edits, &gd(0.5, 0), cs, EvalOptions::default()).unwrap();
        assert_eq!(report.n_edits, 5);
        assert_eq!(report.mean_drawdown, 0.0);
        assert_eq!(report.mean_drawdown_signed, 0.0);
        assert_eq!(report.mean_steps, 0.0);
        for r in &report.per_edit {
            assert_eq!(r.error_after, report.base_error);
            assert_eq!(r.trace.steps_taken, 0);
        }
        // Success rate is exactly the fraction of already-satisfied edits.
        let satisfied = report.per_edit.iter().filter(|r| r.trace.satisfied).count();
        assert_eq!(report.success_rate, satisfied as f64 / 5.0);
        assert!(report.confusion_drawdown.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(report.editable_groups, vec!["head".to_string()]);

        let dm = descriptor_matrix(&model_cfg, &params, &edits, &gd(0.5, 0), &cx).unwrap();
        assert!(dm.matrix.to_f64_vec().iter().all(|&v| v == 0.0));
        assert_eq!((dm.n_edits(), dm.m_control()), (5, cy.len()));
    }

    #[test]
    fn drawdown_is_the_mean_absolute_error_change() {
        // The definition on three edits: |0.12-0.10|, |0.08-0.10|, |0.10-0.10|.
        let before = 0.10;
        let after = [0.12, 0.08, 0.10];
        let mean_abs: f64 = after.iter().map(|a| (a - before) as f64)
            .map(f64::abs).sum::<f64>() / 3.0;
        assert!((mean_abs - 0.04 / 3.0).abs() < 1e-15);
        assert!((mean_abs - 0.013333333333333334).abs() < 1e-15);
        let mean_signed: f64 = after.iter().map(|a| a - before).sum::<f64>() / 3.0;
        assert!(mean_signed.abs() < 1e-15);
    }

    #[test]
    fn reports_are_deterministic_and_permutation_stable() {
        let (model_cfg, params, ds) = desk();
        let edits = make_edits(&ds, &[1, 4, 9, 16, 25, 36]);
        let (cx, cy) = control(&ds);
        let cs = ControlSet::new(&cx, &cy).unwrap();
        let cfg = gd(0.4, 10);
        let a = evaluate_edits(&model_cfg, &params, &edits, &cfg, cs, EvalOptions::default()).unwrap();
        let b = evaluate_edits(&model_cfg, &params, &edits, &cfg, cs, EvalOptions::default()).unwrap();
        assert_eq!(a, b);

        let perm = [3usize, 0, 5, 1, 4, 2];
        let shuffled: Vec<EditConstraint> = perm.iter().map(|&i| edits[i].clone()).collect();
        let c = evaluate_edits(&model_cfg, &params, &shuffled, &cfg, cs, EvalOptions::default()).unwrap();
        assert!((a.mean_drawdown - c.mean_drawdown).abs() < 1e-12);
        assert!((a.mean_drawdown_signed - c.mean_drawdown_signed).abs() < 1e-12);
        assert_eq!(a.success_rate, c.success_rate);
        assert_eq!(a.mean_steps, c.mean_steps);
        for (ci, &oi) in perm.iter().enumerate() {
            assert_eq!(c.per_edit[ci].error_after, a.per_edit[oi].error_after);
            assert_eq!(c.per_edit[ci].trace, a.per_edit[oi].trace);
        }
    }

    #[test]
    fn confusion_rows_for_unseen_classes_stay_zero() {
        let (model_cfg, params, ds) = desk();
        let edits = make_edits(&ds, &[2, 5]);
        let (cx, cy) = control(&ds);
        let cs = ControlSet::new(&cx, &cy).unwrap();
        let report =
            evaluate_edits(&model_cfg, &params, &edits, &gd(0.6, 10), cs, EvalOptions::default())
                .unwrap();
        let seen: Vec<usize> = report.per_edit.iter().map(|r| r.pre_edit_prediction).collect();
        for row in 0..3 {
            if !seen.contains(&row) {
                assert!(report.confusion_drawdown[row].iter().all(|&v| v == 0.0));
            }
        }
        assert!(report.success_rate > 0.0, "test setup should satisfy some edits");
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (model_cfg, params, ds) = desk();
        let (cx, cy) = control(&ds);
        let cs = ControlSet::new(&cx, &cy).unwrap();
        assert!(matches!(
            evaluate_edits(&model_cfg, &params, &[], &gd(0.5, 5), cs, EvalOptions::default()),
            Err(Error::Empty(_))
        ));
        assert!(ControlSet::new(&cx, &cy[..10]).is_err());
        let empty = Tensor::from_f64(vec![0, 4], vec![]).unwrap();
        assert!(matches!(ControlSet::new(&empty, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn sequential_curve_starts_at_base_error_and_accumulates() {
        let (model_cfg, params, ds) = desk();
        let (cx, cy) = control(&ds);
        let cs = ControlSet::new(&cx, &cy).unwrap();
        let cfg = gd(0.4, 10);

        let none = sequential_edit_eval(&model_cfg, &params, &[], &cfg, cs).unwrap();
        let single = evaluate_edits(
            &model_cfg,
            &params,
            &make_edits(&ds, &[0]),
            &cfg,
            cs,
            EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(none.error_curve, vec![single.base_error]);
        assert!(none.success.is_empty());

        let edits = make_edits(&ds, &[0, 6, 13]);
        let seq = sequential_edit_eval(&model_cfg, &params, &edits, &cfg, cs).unwrap();
        assert_eq!(seq.error_curve.len(), 4);
        assert_eq!(seq.success.len(), 3);
        assert_eq!(seq.error_curve[0], single.base_error);
    }

    #[test]
    fn descriptor_rows_reflect_prediction_changes() {
        let (model_cfg, params, ds) = desk();
        let (cx, _) = control(&ds);
        let edits = make_edits(&ds, &[0, 6]);
        let cfg = gd(0.8, 10);
        let dm = descriptor_matrix(&model_cfg, &params, &edits, &cfg, &cx).unwrap();
        let v = dm.matrix.to_f64_vec();
        assert!(v.iter().all(|&x| x >= 0.0));
        // A satisfied, parameter-moving edit must register on some sample.
        let report = evaluate_edits(
            &model_cfg,
            &params,
            &edits,
            &cfg,
            ControlSet::new(&cx, &vec![0; cx.shape()[0]]).unwrap(),
            EvalOptions::default(),
        )
        .unwrap();
        for (i, r) in report.per_edit.iter().enumerate() {
            if r.trace.satisfied && r.trace.steps_taken > 0 {
                let m = dm.m_control();
                assert!(
                    v[i * m..(i + 1) * m].iter().any(|&x| x > 0.0),
                    "edit {i} moved parameters but left every control KL at zero"
                );
            }
        }
    }

    #[test]
    fn explained_variance_frozen_cases() {
        // Rank-1: a single direction explains everything.
        let rank1 = Tensor::from_f64(vec![3, 2], vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let ev = explained_variance(&rank1, 1).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0] - 1.0).abs() < 1e-12);

        // Orthogonal design with two equal singular values: [0.5, 1.0].
        let ortho = Tensor::from_f64(
            vec![4, 2],
            vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0],
        )
        .unwrap();
        let ev = explained_variance(&ortho, 2).unwrap();
        assert!((ev[0] - 0.5).abs() < 1e-12, "{ev:?}");
        assert!((ev[1] - 1.0).abs() < 1e-12);

        // Constant matrix centers to zero: degenerate.
        let flat = Tensor::from_f64(vec![2, 2], vec![3.0; 4]).unwrap();
        assert!(matches!(
            explained_variance(&flat, 2),
            Err(Error::DegenerateMatrix)
        ));

        // Random matrix: non-decreasing, ends at 1 at full rank.
        let mut rng = rng::stream_rng(0, Stream::EvalEdits);
        let data: Vec<f64> = (0..40).map(|_| rng::normal(&mut rng)).collect();
        let rand = Tensor::from_f64(vec![8, 5], data).unwrap();
        let ev = explained_variance(&rand, 5).unwrap();
        for w in ev.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert!((ev.last().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn paired_probes_count_reference_hits() {
        let (model_cfg, params, ds) = desk();
        // Probe identical to the edit input: a satisfied edit means the
        // input is classified as y_ref (strictly, up to argmax ties).
        let x = ds.features().gather_rows(&[0]).unwrap().reshape(vec![4]).unwrap();
        let y_ref = (ds.labels()[0] + 1) % 3;
        let pair = EditProbePair {
            edit_x: x.clone(),
            probe_x: x,
            y_ref,
        };
        let acc =
            paired_generalization_eval(&model_cfg, &params, &[pair.clone()], &gd(0.8, 20)).unwrap();
        assert_eq!(acc, 1.0);

        // k = 0: accuracy is exactly the pre-edit rate of y_ref on probes.
        let pairs = twin_pairs(ds.features(), ds.train_indices(), 3, 0.1, 12, 0).unwrap();
        let acc0 = paired_generalization_eval(&model_cfg, &params, &pairs, &gd(0.8, 0)).unwrap();
        let probes: Vec<Tensor> = pairs.iter().map(|p| p.probe_x.clone()).collect();
        let mut hits = 0;
        for (p, pair) in probes.iter().zip(&pairs) {
            let row = p.cast(model_cfg.dtype).reshape(vec![1, 4]).unwrap();
            if predictions(&model_cfg, &params, &row).unwrap()[0] == pair.y_ref {
                hits += 1;
            }
        }
        assert_eq!(acc0, hits as f64 / pairs.len() as f64);

        assert!(matches!(
            paired_generalization_eval(&model_cfg, &params, &[], &gd(0.5, 5)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn twin_pairs_are_deterministic() {
        let ds = gen_blobs(3, 10, 4, 0.6, 9).unwrap();
        let a = twin_pairs(ds.features(), &[0, 1, 2, 3], 3, 0.2, 6, 42).unwrap();
        let b = twin_pairs(ds.features(), &[0, 1, 2, 3], 3, 0.2, 6, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].edit_x, a[0].probe_x);
        let c = twin_pairs(ds.features(), &[0, 1, 2, 3], 3, 0.2, 6, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tuning_filters_by_success_and_prefers_low_drawdown() {
        let (model_cfg, params, ds) = desk();
        let edits = make_edits(&ds, &[0, 3, 7, 11, 20, 28, 33, 41]);
        let (cx, cy) = control(&ds);
        let cs = ControlSet::new(&cx, &cy).unwrap();

        // A hopeless step size and a workable one.
        let grid = vec![
            TuneCandidate { editor: gd(1e-9, 10), editable_groups: None },
            TuneCandidate { editor: gd(0.5, 10), editable_groups: Some(vec!["head".into()]) },
        ];
        let (winner, report) = tune_editor(&model_cfg, &params, &edits, cs, &grid).unwrap();
        assert_eq!(report.chosen, 1);
        assert_eq!(winner.editor.alpha, 0.5);
        assert_eq!(winner.editor.k, TUNE_K);
        assert!(!report.outcomes[0].feasible);
        assert!(report.outcomes[1].feasible);

        // Identical candidates tie on drawdown: the earlier one wins.
        let twin_grid = vec![
            TuneCandidate { editor: gd(0.5, 3), editable_groups: None },
            TuneCandidate { editor: gd(0.5, 7), editable_groups: None },
        ];
        let (_, report) = tune_editor(&model_cfg, &params, &edits, cs, &twin_grid).unwrap();
        assert_eq!(report.chosen, 0, "tie must break toward the earlier entry");
        assert_eq!(
            report.outcomes[0].mean_drawdown,
            report.outcomes[1].mean_drawdown,
            "both candidates run at the same tuning budget"
        );

        // Nothing feasible: the error carries the best rate seen.
        let bad = vec![TuneCandidate { editor: gd(1e-9, 10), editable_groups: None }];
        match tune_editor(&model_cfg, &params, &edits, cs, &bad) {
            Err(Error::InfeasibleGrid { best_rate }) => assert!(best_rate < 0.95),
            other => panic!("expected infeasible grid, got {other:?}"),
        }
        assert!(matches!(
            tune_editor(&model_cfg, &params, &edits, cs, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn excluding_the_edited_input_uses_the_reduced_control_set() {
        let (model_cfg, params, ds) = desk();
        // Use a control set that contains the edit input itself.
        let rows: Vec<usize> = (0..30).collect();
        let cx = ds.features().gather_rows(&rows).unwrap();
        let cy: Vec<usize> = rows.iter().map(|&i| ds.labels()[i]).collect();
        let cs = ControlSet::new(&cx, &cy).unwrap();
        let edits = make_edits(&ds, &[4]);
        let cfg = gd(0.6, 10);
        let incl = evaluate_edits(&model_cfg, &params, &edits, &cfg, cs, EvalOptions::default())
            .unwrap();
        let excl = evaluate_edits(
            &model_cfg,
            &params,
            &edits,
            &cfg,
            cs,
            EvalOptions { exclude_edited_input: true },
        )
        .unwrap();
        // Both are valid reports over 30 vs 29 samples; base_error always
        // refers to the full control set.
        assert_eq!(incl.base_error, excl.base_error);
        assert_eq!(incl.n_edits, excl.n_edits);
        assert!(excl.per_edit[0].error_after.is_finite());
    }
}
