//! `softpipe` command-line driver.
//!
//! Everything lives under `--workdir`: `datasets/` holds JSONL datasets,
//! `ckpts/` model and pipeline checkpoints, `reports/` run reports and
//! experiment directories. Artifact paths passed as flags (`--out`,
//! `--*-ckpt`) are relative to the workdir; `--config` and `--spec` are
//! relative to the current directory.

mod commands;
mod config;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use softpipe::pipeline::InferenceMode;
use softpipe::tasks::Style;
use softpipe::train::{Direction, FreezeStrategy, Regime};
use softpipe::Error;

#[derive(Debug, Parser)]
#[command(name = "softpipe", version, about = "Differentiable summarize-then-translate pipeline on toy tasks")]
pub struct Cli {
    /// Root for datasets/, ckpts/ and reports/.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `finetune.learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads for experiment sub-runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    A,
    B,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::A => Style::A,
            StyleArg::B => Style::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    ShotCurve,
    AlphaSweep,
    FreezeAblation,
    SoftVsHard,
    CrossDomain,
    ForgettingDemo,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ShotCurve => "shot-curve",
            Self::AlphaSweep => "alpha-sweep",
            Self::FreezeAblation => "freeze-ablation",
            Self::SoftVsHard => "soft-vs-hard",
            Self::CrossDomain => "cross-domain",
            Self::ForgettingDemo => "forgetting-demo",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset with train/val/test splits.
    GenData {
        /// Summary style; overrides `task.style`.
        #[arg(long, value_enum)]
        style: Option<StyleArg>,
        /// Task spec JSON replacing the config's `task` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Split sizes as `train,val,test`.
        #[arg(long)]
        sizes: Option<String>,
        /// Output file; defaults to datasets/<style>.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the summarizer on document to source-language summary.
    TrainSum {
        #[arg(long, default_value = "a")]
        dataset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a translator between the two summary languages.
    TrainTra {
        #[arg(long, default_value = "forward")]
        direction: Direction,
        #[arg(long, default_value = "a")]
        dataset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the single-model baseline.
    TrainDirect {
        #[arg(long)]
        regime: Regime,
        #[arg(long, default_value = "a")]
        dataset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill every record's back-translated reference in place.
    Backtranslate {
        #[arg(long, default_value = "a")]
        dataset: String,
        #[arg(long)]
        reverse_ckpt: Option<PathBuf>,
    },
    /// Fine-tune the coupled pipeline on k shots.
    Finetune {
        #[arg(long)]
        sum_ckpt: Option<PathBuf>,
        #[arg(long)]
        tra_ckpt: Option<PathBuf>,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        freeze: Option<FreezeStrategy>,
        #[arg(long, default_value = "a")]
        dataset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a direct model or a pipeline on the test split.
    Eval {
        /// Direct model checkpoint.
        #[arg(long, conflicts_with_all = ["pipeline_ckpt", "sum_ckpt", "tra_ckpt"])]
        ckpt: Option<PathBuf>,
        /// Pipeline checkpoint written by `finetune`.
        #[arg(long, conflicts_with_all = ["sum_ckpt", "tra_ckpt"])]
        pipeline_ckpt: Option<PathBuf>,
        /// Zero-shot pipeline summarizer (default ckpts/sum-<dataset>.ckpt).
        #[arg(long)]
        sum_ckpt: Option<PathBuf>,
        /// Zero-shot pipeline translator (default ckpts/tra-forward.ckpt).
        #[arg(long)]
        tra_ckpt: Option<PathBuf>,
        #[arg(long, default_value = "a")]
        dataset: String,
        #[arg(long, default_value = "hard")]
        mode: InferenceMode,
        /// Also measure per-sample inference time.
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Score only the first N test records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference check of the full mixed loss on the tiny config.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Run a multi-run experiment into reports/experiments/<name>/.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[arg(long, default_value = "a")]
        dataset: String,
        /// Second dataset for cross-domain runs.
        #[arg(long, default_value = "b")]
        other_dataset: String,
        #[arg(long)]
        sum_ckpt: Option<PathBuf>,
        #[arg(long)]
        tra_ckpt: Option<PathBuf>,
        /// Direct baseline for the shot curve (default ckpts/direct-mono-only.ckpt).
        #[arg(long)]
        direct_ckpt: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
