//! The five commands: train, eval-edits, edit, tune, analyze. Each returns
//! a structured error carrying the process exit code; main only prints and
//! exits.

use std::path::{Path, PathBuf};

use editnn_core::constraints::{Competitors, EditConstraint, SamplerStrategy, TargetSampler};
use editnn_core::data_io::{load_checkpoint, save_checkpoint, write_descriptor_matrix, Dataset};
use editnn_core::editors::edit;
use editnn_core::evaluation::{
    descriptor_matrix, evaluate_edits, explained_variance, tune_editor, ControlSet, EvalOptions,
};
use editnn_core::training::{train, train_from, fine_tune, BaseLoss};
use editnn_core::{Error, Tensor};

use crate::config::RunConfig;

/// Process-level failure: a message for stderr and the exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match e {
            Error::Divergence { .. } => 3,
            Error::InfeasibleGrid { .. } => 5,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), CliError>;

fn invalid(message: String) -> CliError {
    CliError { code: 2, message }
}

/// Run `f`, optionally inside a dedicated pool of `workers` threads.
/// Reports are index-merged, so the worker count never changes output bytes.
fn with_pool<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, Error> + Send,
) -> Result<T, CliError> {
    match workers {
        None => Ok(f()?),
        Some(0) => Err(invalid("--workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| invalid(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f)?)
        }
    }
}

fn ensure_parent(path: &Path) -> CmdResult {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// The metrics JSONL sits next to the checkpoint under the same stem.
fn metrics_path_for(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("metrics.jsonl")
}

/// Draw edit tasks from the held-out split. The first `skip` draws are
/// discarded; tuning consumes the head of the stream, reporting the rest,
/// so the two edit sets are disjoint for a given seed.
fn sample_edits(
    cfg: &RunConfig,
    dataset: &Dataset,
    skip: usize,
    count: usize,
) -> Result<Vec<EditConstraint>, Error> {
    let mut sampler = TargetSampler::new(SamplerStrategy::Uniform, cfg.seed)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..skip + count {
        let c = sampler.sample(
            dataset.features(),
            dataset.test_indices(),
            cfg.model.num_classes,
            None,
        )?;
        if i >= skip {
            out.push(c);
        }
    }
    Ok(out)
}

fn control_of(dataset: &Dataset) -> Result<(Tensor, Vec<usize>), Error> {
    let idx = dataset.test_indices();
    let x = dataset.features().gather_rows(idx)?;
    let y = idx.iter().map(|&i| dataset.labels()[i]).collect();
    Ok((x, y))
}

pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    timings: bool,
) -> CmdResult {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dataset = cfg.dataset()?;

    let (params, learned_editor, log) = match (&cfg.train.base_loss, resume) {
        (BaseLoss::DistillKl, Some(teacher_path)) => {
            let teacher = load_checkpoint(teacher_path)?;
            let teacher_cfg = RunConfig::from_value(&teacher.run_config)?.model;
            fine_tune(
                &teacher_cfg,
                &teacher.params,
                &cfg.model,
                &dataset,
                &cfg.train,
                cfg.seed,
            )?
        }
        (BaseLoss::DistillKl, None) => {
            return Err(invalid(
                "distillation needs a teacher checkpoint via --resume".into(),
            ))
        }
        (_, Some(prev_path)) => {
            let prev = load_checkpoint(prev_path)?;
            train_from(&cfg.model, &prev.params, &dataset, &cfg.train, cfg.seed)?
        }
        (_, None) => train(&cfg.model, &dataset, &cfg.train, cfg.seed)?,
    };

    // Store the learned editor values inside the embedded config so later
    // commands edit with exactly what training produced.
    let mut stored = cfg.clone();
    stored.train.editor = learned_editor;
    let stored_value = serde_json::to_value(&stored)?;

    let out_path = cfg.resolve(out);
    ensure_parent(&out_path)?;
    save_checkpoint(&out_path, &params, &[], &stored_value)?;
    std::fs::write(metrics_path_for(&out_path), log.to_jsonl(timings)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval_edits(
    ckpt: &Path,
    config_path: &Path,
    n: Option<usize>,
    editor_name: &str,
    layers: Option<&[String]>,
    report_path: &Path,
    descriptors: Option<&Path>,
    workers: Option<usize>,
    seed: Option<u64>,
) -> CmdResult {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let checkpoint = load_checkpoint(ckpt)?;
    let mut params = checkpoint.params;
    if let Some(groups) = layers {
        params = params.select_editable(groups)?;
    }
    let editor = cfg.eval.editors.get(editor_name).ok_or_else(|| {
        let known: Vec<&str> = cfg.eval.editors.keys().map(String::as_str).collect();
        invalid(format!(
            "config defines no editor named {editor_name:?} (available: {known:?})"
        ))
    })?;

    let dataset = cfg.dataset()?;
    let count = n.unwrap_or(cfg.eval.n_edits);
    let edits = sample_edits(&cfg, &dataset, cfg.eval.tuning_edits, count)?;
    let (cx, cy) = control_of(&dataset)?;
    let options = EvalOptions {
        exclude_edited_input: cfg.eval.exclude_edited_input,
    };

    let model_cfg = &cfg.model;
    let want_descriptors = descriptors.is_some();
    let (report, matrix) = with_pool(workers, || {
        let control = ControlSet::new(&cx, &cy)?;
        let report = evaluate_edits(model_cfg, &params, &edits, editor, control, options)?;
        let matrix = if want_descriptors {
            Some(descriptor_matrix(model_cfg, &params, &edits, editor, &cx)?)
        } else {
            None
        };
        Ok((report, matrix))
    })?;

    write_json(&cfg.resolve(report_path), &report)?;
    if let (Some(path), Some(dm)) = (descriptors, matrix) {
        let resolved = cfg.resolve(path);
        ensure_parent(&resolved)?;
        write_descriptor_matrix(&resolved, &dm.matrix)?;
    }
    Ok(())
}

pub fn cmd_edit(ckpt: &Path, input: &Path, target: usize, out: &Path) -> CmdResult {
    let checkpoint = load_checkpoint(ckpt)?;
    let run_cfg = RunConfig::from_value(&checkpoint.run_config)?;
    let model_cfg = &run_cfg.model;
    if target >= model_cfg.num_classes {
        return Err(invalid(format!(
            "target class {target} is out of range for a {}-class model",
            model_cfg.num_classes
        )));
    }
    let text = std::fs::read_to_string(input)?;
    let values: Vec<f64> = serde_json::from_str(&text)?;
    if values.len() != model_cfg.input_dim {
        return Err(invalid(format!(
            "input has {} features, the model expects {}",
            values.len(),
            model_cfg.input_dim
        )));
    }
    let x = Tensor::from_f64(vec![values.len()], values)?.cast(model_cfg.dtype);
    let constraint = EditConstraint::new(x, target, Competitors::AllOther)?;

    let (edited, trace) = edit(model_cfg, &checkpoint.params, &constraint, &run_cfg.train.editor)?;
    println!("{}", serde_json::to_string(&trace)?);
    if !trace.satisfied {
        return Err(CliError {
            code: 4,
            message: format!(
                "constraint not satisfied after {} steps; checkpoint not written",
                trace.steps_taken
            ),
        });
    }
    let out_path = run_cfg.resolve(out);
    ensure_parent(&out_path)?;
    save_checkpoint(&out_path, &edited, &checkpoint.extra, &checkpoint.run_config)?;
    Ok(())
}

pub fn cmd_tune(
    ckpt: &Path,
    config_path: &Path,
    report_path: &Path,
    workers: Option<usize>,
    seed: Option<u64>,
) -> CmdResult {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let checkpoint = load_checkpoint(ckpt)?;
    let dataset = cfg.dataset()?;
    let edits = sample_edits(&cfg, &dataset, 0, cfg.eval.tuning_edits)?;
    let (cx, cy) = control_of(&dataset)?;

    let model_cfg = &cfg.model;
    let params = &checkpoint.params;
    let grid = &cfg.eval.grid;
    let (winner, report) = with_pool(workers, || {
        let control = ControlSet::new(&cx, &cy)?;
        tune_editor(model_cfg, params, &edits, control, grid)
    })?;

    write_json(
        &cfg.resolve(report_path),
        &serde_json::json!({ "winner": winner, "report": report }),
    )?;
    Ok(())
}

pub fn cmd_analyze(descriptors: &Path, report_path: &Path, components: usize) -> CmdResult {
    let matrix = editnn_core::data_io::read_descriptor_matrix(descriptors)?;
    let curve = explained_variance(&matrix, components)?;
    write_json(
        report_path,
        &serde_json::json!({ "explained_variance": curve }),
    )?;
    Ok(())
}
