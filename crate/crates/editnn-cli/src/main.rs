//! `editnn`: train small classifiers whose mistakes can be patched by a
//! few gradient steps, apply such patches, and audit their side effects.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 training
//! divergence, 4 edit failure, 5 infeasible tuning grid.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "editnn", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or fine-tune) a model from a run config and write a checkpoint.
    Train {
        /// Run config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path; metrics land next to it as
        /// <stem>.metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of a fresh initialization;
        /// with a distillation loss this is the teacher.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Include wall-clock timings in the metrics (makes the file
        /// non-reproducible byte for byte).
        #[arg(long)]
        timings: bool,
    },
    /// Evaluate a batch of independent edits and write the report JSON.
    EvalEdits {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Number of edits (defaults to the config's eval.n_edits).
        #[arg(long)]
        n: Option<usize>,
        /// Which entry of eval.editors to use.
        #[arg(long)]
        editor: String,
        /// Restrict editing to these parameter groups (comma-separated).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        #[arg(long)]
        report: PathBuf,
        /// Also write the per-edit KL descriptor matrix here.
        #[arg(long)]
        descriptors: Option<PathBuf>,
        /// Thread count for the independent edits (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply one edit to a checkpoint; prints the edit trace as JSON.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON array with one feature vector.
        #[arg(long)]
        input: PathBuf,
        /// Class the input must be assigned.
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search editor hyperparameters on held-out edits.
    Tune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Explained-variance spectrum of a stored descriptor matrix.
    Analyze {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Components to report.
        #[arg(long, default_value_t = 10)]
        components: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
            timings,
        } => commands::cmd_train(config, out, *seed, resume.as_deref(), *timings),
        Command::EvalEdits {
            ckpt,
            config,
            n,
            editor,
            layers,
            report,
            descriptors,
            workers,
            seed,
        } => commands::cmd_eval_edits(
            ckpt,
            config,
            *n,
            editor,
            layers.as_deref(),
            report,
            descriptors.as_deref(),
            *workers,
            *seed,
        ),
        Command::Edit {
            ckpt,
            input,
            target,
            out,
        } => commands::cmd_edit(ckpt, input, *target, out),
        Command::Tune {
            ckpt,
            config,
            report,
            workers,
            seed,
        } => commands::cmd_tune(ckpt, config, report, *workers, *seed),
        Command::Analyze {
            descriptors,
            report,
            components,
        } => commands::cmd_analyze(descriptors, report, *components),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
