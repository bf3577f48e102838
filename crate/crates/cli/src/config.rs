use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use softpipe::experiment::ExperimentOptions;
use softpipe::model::ModelConfig;
use softpipe::pipeline::SUMMARY_SLACK;
use softpipe::tasks::ToyTaskSpec;
use softpipe::train::TrainConfig;
use softpipe::{Error, Result};

pub const SEED_ENV: &str = "SOFTPIPE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            n_train: 3000,
            n_val: 200,
            n_test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub datasets: PathBuf,
    pub ckpts: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            datasets: "datasets".into(),
            ckpts: "ckpts".into(),
            reports: "reports".into(),
        }
    }
}

/// Multi-run settings. Fine-tuning hyperparameters come from `finetune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub fixed_shots: usize,
    pub alpha_grid: Vec<f64>,
    pub val_limit: usize,
    pub test_limit: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentOptions::default();
        Self {
            shots: d.shots,
            seeds: d.seeds,
            fixed_shots: d.fixed_shots,
            alpha_grid: d.alpha_grid,
            val_limit: d.val_limit,
            test_limit: d.test_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Base seed for model initialization.
    pub seed: u64,
    pub task: ToyTaskSpec,
    pub data: DataSizes,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub experiment: ExperimentSection,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: ToyTaskSpec::default(),
            data: DataSizes::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretraining(),
            finetune: TrainConfig::finetuning(),
            experiment: ExperimentSection::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then the config file, then `--set` overrides, then the seed
    /// environment variable.
    pub fn resolve(file: Option<&Path>, sets: &[String], env_seed: Option<String>) -> Result<Self> {
        let mut value = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                let file_value: Value = serde_json::from_str(&text)?;
                // reject unknown keys before merging with defaults
                serde_json::from_value::<ExperimentConfig>(file_value.clone())?;
                file_value
            }
            None => Value::Object(Default::default()),
        };
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut merged, std::mem::take(&mut value));
        for set in sets {
            apply_set(&mut merged, set)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(merged)?;
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Contract(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
            cfg.seed = seed;
            cfg.task.seed = seed;
            cfg.pretrain.seed = seed;
            cfg.finetune.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let vocab = self.task.vocab().size();
        if self.model.vocab_size != vocab {
            return Err(Error::Contract(format!(
                "model.vocab_size {} does not match the task vocabulary {vocab} (8 + 2·content_size)",
                self.model.vocab_size
            )));
        }
        if self.model.max_src_len < self.task.document_len() {
            return Err(Error::Contract(format!(
                "model.max_src_len {} is shorter than the task documents ({})",
                self.model.max_src_len,
                self.task.document_len()
            )));
        }
        Ok(())
    }

    pub fn summary_max_len(&self) -> usize {
        self.task.max_summary_len() + SUMMARY_SLACK
    }

    pub fn experiment_options(&self) -> ExperimentOptions {
        let e = &self.experiment;
        ExperimentOptions {
            shots: e.shots.clone(),
            seeds: e.seeds.clone(),
            fixed_shots: e.fixed_shots,
            alpha_grid: e.alpha_grid.clone(),
            val_limit: e.val_limit,
            test_limit: e.test_limit,
            summary_max_len: self.summary_max_len(),
            train: self.finetune.clone(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string; the key must already exist.
pub fn apply_set(root: &mut Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Contract(format!("--set expects key=value, got `{set}`")))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| Error::Contract(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
