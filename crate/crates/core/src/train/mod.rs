//! Training harness: AdamW, gradient accumulation, early stopping on
//! validation loss, and the pretraining / fine-tuning entry points.

mod optim;
mod runs;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::AdamW;
pub use runs::{
    finetune, finetune_direct, generate_backtranslations, pretrain_sum, pretrain_tra, teacher_forced_accuracy,
    train_direct_baseline, train_seq2seq, BacktranslationReport, Direction, Example, Regime,
};

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::Seq2SeqModel;
use crate::pipeline::{LossBreakdown, SumTraPipeline};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeStrategy {
    /// Both modules train.
    #[default]
    All,
    /// Only the summarizer trains; the translator is frozen.
    SumOnly,
    /// Only the translator trains; the summarizer is frozen.
    TraOnly,
}

impl FreezeStrategy {
    pub fn trains_sum(self) -> bool {
        self != FreezeStrategy::TraOnly
    }

    pub fn trains_tra(self) -> bool {
        self != FreezeStrategy::SumOnly
    }
}

impl std::str::FromStr for FreezeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "sum_only" | "sum-only" => Ok(Self::SumOnly),
            "tra_only" | "tra-only" => Ok(Self::TraOnly),
            other => Err(Error::contract(format!(
                "unknown freeze strategy `{other}` (all|sum_only|tra_only)"
            ))),
        }
    }
}

impl std::fmt::Display for FreezeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::SumOnly => "sum_only",
            Self::TraOnly => "tra_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub freeze_strategy: FreezeStrategy,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            max_epochs: 10,
            early_stopping_patience: 2,
            batch_size: 1,
            grad_accumulation: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
            seed: 0,
            freeze_strategy: FreezeStrategy::All,
            alpha: crate::pipeline::DEFAULT_ALPHA,
        }
    }
}

impl TrainConfig {
    /// Defaults with 500 warm-up steps.
    pub fn pretraining() -> Self {
        Self {
            warmup_steps: 500,
            ..Self::default()
        }
    }

    /// Defaults with no warm-up.
    pub fn finetuning() -> Self {
        Self::default()
    }

    /// The small learning rate used at full scale.
    pub fn with_full_scale_learning_rate(self) -> Self {
        Self {
            learning_rate: 3e-5,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.early_stopping_patience >= self.max_epochs {
            return fail(format!(
                "early_stopping_patience ({}) must be below max_epochs ({})",
                self.early_stopping_patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return fail("batch_size and grad_accumulation must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based) with linear warm-up.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First 12 hex digits of the SHA-256 of a JSON value.
pub fn config_hash(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub version: String,
    pub config: serde_json::Value,
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the selected checkpoint within the last phase.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Validation loss never went below its value before training.
    pub no_improvement: bool,
    pub optimizer_steps: usize,
    pub skipped_records: usize,
    pub metrics: Option<MetricReport>,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub train_seconds: f64,
}

impl RunReport {
    pub(crate) fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            initial_val_loss: None,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_loss: None,
            no_improvement: false,
            optimizer_steps: 0,
            skipped_records: 0,
            metrics: None,
            extra: BTreeMap::new(),
            train_seconds: 0.0,
        }
    }

    pub(crate) fn absorb(&mut self, phase: &str, fit: FitOutcome) {
        self.initial_val_loss = fit.initial_val_loss;
        self.epochs.extend(fit.epochs.into_iter().map(|mut e| {
            e.phase = phase.into();
            e
        }));
        self.best_epoch = fit.best_epoch;
        self.best_val_loss = fit.best_val_loss;
        self.no_improvement = fit.no_improvement;
        self.optimizer_steps += fit.optimizer_steps;
        self.skipped_records += fit.skipped_records;
        self.train_seconds += fit.seconds;
    }

    /// `<kind>-<config hash>-s<seed>.json`
    pub fn file_name(&self, seed: u64) -> String {
        format!("{}-{}-s{seed}.json", self.kind, config_hash(&self.config))
    }
}

/// Something the fit loop can update: one model or a pipeline.
pub trait Trainable: Clone {
    fn modules_mut(&mut self) -> Vec<&mut Seq2SeqModel<f32>>;
}

impl Trainable for Seq2SeqModel<f32> {
    fn modules_mut(&mut self) -> Vec<&mut Seq2SeqModel<f32>> {
        vec![self]
    }
}

impl Trainable for SumTraPipeline<f32> {
    fn modules_mut(&mut self) -> Vec<&mut Seq2SeqModel<f32>> {
        let (sum, tra) = self.modules_mut();
        vec![sum, tra]
    }
}

/// One record's loss. `vars[m]` lists module `m`'s parameter handles, or
/// `None` when that module is frozen.
pub struct StepLoss {
    pub loss: Var,
    pub vars: Vec<Option<Vec<Var>>>,
    pub breakdown: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub no_improvement: bool,
    pub optimizer_steps: usize,
    pub skipped_records: usize,
    pub seconds: f64,
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c < b,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Generic training loop. `step` returns `None` for records that must be
/// skipped (counted in the outcome). After the loop `state` holds the
/// parameters from the epoch with the lowest validation loss.
pub fn fit<S, I>(
    state: &mut S,
    train: &[I],
    cfg: &TrainConfig,
    mut step: impl FnMut(&S, &mut Tape<f32>, &I, u64) -> Result<Option<StepLoss>>,
    mut validate: impl FnMut(&S) -> Result<Option<f64>>,
) -> Result<FitOutcome>
where
    S: Trainable,
{
    cfg.validate()?;
    let start = Instant::now();
    let n_modules = state.modules_mut().len();
    let mut optimizers: Vec<AdamW> = (0..n_modules).map(|_| AdamW::new(cfg)).collect();
    let initial_val_loss = validate(state)?;
    let mut best_val_loss: Option<f64> = None;
    let mut best_state = state.clone();
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut epochs = Vec::new();
    let mut global_step = 0;
    let mut skipped = 0;
    let group = cfg.batch_size * cfg.grad_accumulation;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(group) {
            let mut acc: Vec<Vec<Option<Vec<f32>>>> = Vec::with_capacity(n_modules);
            for m in state.modules_mut() {
                acc.push(vec![None; m.params().len()]);
            }
            let mut used = 0usize;
            for &i in chunk {
                let mut tape = Tape::new();
                let record_seed = cfg.seed ^ ((epoch as u64) << 32) ^ i as u64;
                let Some(out) = step(state, &mut tape, &train[i], record_seed)? else {
                    skipped += 1;
                    continue;
                };
                if let Some(b) = &out.breakdown {
                    b.check()?;
                }
                let value = tape.value(out.loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("loss became {value} at epoch {epoch}")));
                }
                tape.backward(out.loss)?;
                for (m, vars) in out.vars.iter().enumerate() {
                    let Some(vars) = vars else { continue };
                    for (p, &v) in vars.iter().enumerate() {
                        if let Some(g) = tape.take_grad(v) {
                            match &mut acc[m][p] {
                                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                                slot => *slot = Some(g),
                            }
                        }
                    }
                }
                loss_total += value as f64;
                loss_count += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f32;
            let lr = cfg.learning_rate_at(global_step);
            for ((module, grads), opt) in state.modules_mut().into_iter().zip(&mut acc).zip(&mut optimizers) {
                for g in grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|x| *x *= inv);
                }
                opt.step(module.params_mut(), grads, lr);
            }
            global_step += 1;
        }
        let val_loss = validate(state)?;
        epochs.push(EpochRecord {
            phase: String::new(),
            epoch,
            train_loss: if loss_count == 0 { 0.0 } else { loss_total / loss_count as f64 },
            val_loss,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {:.4} val {:?}", epochs.last().unwrap().train_loss, val_loss);
        if better(val_loss, best_val_loss) {
            best_val_loss = val_loss;
            best_state = state.clone();
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.early_stopping_patience {
                break;
            }
        }
    }
    *state = best_state;
    Ok(FitOutcome {
        no_improvement: !better(best_val_loss, initial_val_loss),
        initial_val_loss,
        epochs,
        best_epoch,
        best_val_loss,
        optimizer_steps: global_step,
        skipped_records: skipped,
        seconds: start.elapsed().as_secs_f64(),
    })
}
