//! Run configuration: one JSON file describing the model, the data source,
//! training, and evaluation of a reproducible run. Unknown keys anywhere
//! are rejected before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use editnn_core::data_io::{self, Dataset};
use editnn_core::editors::EditorConfig;
use editnn_core::evaluation::TuneCandidate;
use editnn_core::models::ModelConfig;
use editnn_core::training::TrainConfig;
use editnn_core::{Error, Result};

/// Where the dataset comes from. File-backed sources can standardize
/// features using training-split statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DataConfig {
    /// Synthetic Gaussian class clusters.
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        train_count: usize,
    },
    /// Big-endian image/label pair files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        train_count: usize,
        #[serde(default)]
        standardize: bool,
    },
    /// Fixed-record binary batches (3072 pixel bytes after a label byte).
    CifarBinary {
        batches: Vec<PathBuf>,
        train_count: usize,
        #[serde(default)]
        standardize: bool,
    },
}

fn default_n_edits() -> usize {
    100
}

fn default_tuning_edits() -> usize {
    40
}

fn default_components() -> usize {
    10
}

/// Evaluation section: named editors for `--editor`, the tuning grid, and
/// edit-count defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Editor configurations selectable by name from the command line.
    pub editors: BTreeMap<String, EditorConfig>,
    /// Candidates for editor tuning.
    pub grid: Vec<TuneCandidate>,
    /// Default number of independent edits to evaluate.
    pub n_edits: usize,
    /// Number of edits used for tuning (kept apart from reporting edits:
    /// tuning draws come first in the sample stream).
    pub tuning_edits: usize,
    /// Drop control rows equal to the edited input when scoring an edit.
    pub exclude_edited_input: bool,
    /// Components reported by the variance spectrum.
    pub components: usize,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            editors: BTreeMap::new(),
            grid: Vec::new(),
            n_edits: default_n_edits(),
            tuning_edits: default_tuning_edits(),
            exclude_edited_input: false,
            components: default_components(),
        }
    }
}

/// The complete description of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Relative output paths are placed under this directory when set.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(value.clone())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataConfig::Blobs { classes, dim, per_class, spread, train_count } = &self.data {
            if *classes != self.model.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "data has {classes} classes but the model expects {}",
                    self.model.num_classes
                )));
            }
            if *dim != self.model.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "data dimension {dim} does not match model input {}",
                    self.model.input_dim
                )));
            }
            if *per_class == 0 || !(spread.is_finite() && *spread > 0.0) || *train_count == 0 {
                return Err(Error::InvalidConfig(
                    "blob data needs positive per_class, spread, and train_count".into(),
                ));
            }
        }
        for (name, editor) in &self.eval.editors {
            editor
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("editor {name:?}: {e}")))?;
        }
        for (i, candidate) in self.eval.grid.iter().enumerate() {
            candidate
                .editor
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("grid[{i}]: {e}")))?;
        }
        if self.eval.n_edits == 0 || self.eval.tuning_edits == 0 || self.eval.components == 0 {
            return Err(Error::InvalidConfig(
                "eval counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Materialize the dataset: load or generate, split, standardize.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataConfig::Blobs {
                classes,
                per_class,
                dim,
                spread,
                train_count,
            } => data_io::gen_blobs(*classes, *per_class, *dim, *spread, self.seed)?
                .split_random(*train_count, self.seed)?,
            DataConfig::Idx {
                images,
                labels,
                train_count,
                standardize,
            } => {
                let ds = data_io::load_idx(images, labels)?.split_random(*train_count, self.seed)?;
                if *standardize {
                    ds.standardize()?
                } else {
                    ds
                }
            }
            DataConfig::CifarBinary {
                batches,
                train_count,
                standardize,
            } => {
                let ds =
                    data_io::load_cifar_binary(batches)?.split_random(*train_count, self.seed)?;
                if *standardize {
                    ds.standardize()?
                } else {
                    ds
                }
            }
        };
        if ds.dim() != self.model.input_dim {
            return Err(Error::InvalidConfig(format!(
                "dataset dimension {} does not match model input {}",
                ds.dim(),
                self.model.input_dim
            )));
        }
        if ds.num_classes() > self.model.num_classes {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes but the model only outputs {}",
                ds.num_classes(),
                self.model.num_classes
            )));
        }
        Ok(ds)
    }

    /// Relative outputs land under `out_dir` when one is configured.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "seed": 7,
            "model": {"input_dim": 4, "hidden_dims": [8], "num_classes": 3, "activation": "tanh"},
            "data": {"source": "blobs", "classes": 3, "per_class": 30, "dim": 4,
                     "spread": 0.8, "train_count": 60},
            "train": {"editor": {"variant": "gd", "k": 5, "alpha": 0.1}}
        })
    }

    #[test]
    fn minimal_config_parses_and_builds_its_dataset() {
        let cfg = RunConfig::from_value(&minimal()).unwrap();
        assert_eq!(cfg.eval.n_edits, 100);
        let ds = cfg.dataset().unwrap();
        assert_eq!(ds.n(), 90);
        assert_eq!(ds.train_indices().len(), 60);
    }

    #[test]
    fn unknown_keys_and_mismatches_are_rejected() {
        let mut v = minimal();
        v["typo_key"] = serde_json::json!(1);
        assert!(RunConfig::from_value(&v).is_err());

        let mut v = minimal();
        v["data"]["dim"] = serde_json::json!(5);
        assert!(matches!(
            RunConfig::from_value(&v),
            Err(Error::InvalidConfig(_))
        ));

        let mut v = minimal();
        v["eval"] = serde_json::json!({"editors": {"bad": {"variant": "gd", "k": 1, "alpha": -2.0}}});
        assert!(RunConfig::from_value(&v).is_err());
    }

    #[test]
    fn relative_outputs_resolve_under_out_dir() {
        let mut v = minimal();
        v["out_dir"] = serde_json::json!("/tmp/run7");
        let cfg = RunConfig::from_value(&v).unwrap();
        assert_eq!(
            cfg.resolve(Path::new("model.ednn")),
            PathBuf::from("/tmp/run7/model.ednn")
        );
        assert_eq!(
            cfg.resolve(Path::new("/abs/model.ednn")),
            PathBuf::from("/abs/model.ednn")
        );
    }
}
