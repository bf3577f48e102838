use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{fit, FitOutcome, RunReport, StepLoss, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::language_purity;
use crate::model::{Seq2SeqModel, SourceInput};
use crate::pipeline::SumTraPipeline;
use crate::tasks::{Lang, Token, Vocab, XlsRecord, EOS, LANG_SRC};
use crate::tensor::Tape;

/// One teacher-forced pair. The target starts with its language tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
}

impl Example {
    pub fn summarization(r: &XlsRecord) -> Self {
        Self {
            src: r.doc.clone(),
            tgt: r.summary_src.clone(),
        }
    }

    pub fn translation(r: &XlsRecord, direction: Direction) -> Self {
        match direction {
            Direction::Forward => Self {
                src: r.summary_src.clone(),
                tgt: r.summary_tgt.clone(),
            },
            Direction::Reverse => Self {
                src: r.summary_tgt.clone(),
                tgt: r.summary_src.clone(),
            },
        }
    }

    pub fn xls(r: &XlsRecord) -> Self {
        Self {
            src: r.doc.clone(),
            tgt: r.summary_tgt.clone(),
        }
    }

    fn lang(&self) -> Result<Token> {
        self.tgt
            .first()
            .copied()
            .ok_or_else(|| Error::contract("empty target sequence"))
    }
}

/// Translator direction: source summary to target summary, or back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Reverse,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "reverse" => Ok(Self::Reverse),
            other => Err(Error::contract(format!("unknown direction `{other}` (forward|reverse)"))),
        }
    }
}

/// Training schedule of the single-model baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Document to target-language summary.
    Xls,
    /// Source-language summarization first, then cross-lingual.
    MonoThenXls,
    /// Source-language summarization only.
    MonoOnly,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xls" => Ok(Self::Xls),
            "mono-then-xls" => Ok(Self::MonoThenXls),
            "mono-only" => Ok(Self::MonoOnly),
            other => Err(Error::contract(format!(
                "unknown regime `{other}` (xls|mono-then-xls|mono-only)"
            ))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Xls => "xls",
            Self::MonoThenXls => "mono-then-xls",
            Self::MonoOnly => "mono-only",
        })
    }
}

fn mean_nll(model: &Seq2SeqModel<f32>, examples: &[Example]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let nll = bound.nll(&mut tape, SourceInput::Tokens(&ex.src), &ex.tgt, ex.lang()?)?;
        total += tape.value(nll).item() as f64;
    }
    Ok(Some(total / examples.len() as f64))
}

/// Share of target tokens (after the tag) predicted exactly under teacher
/// forcing.
pub fn teacher_forced_accuracy(model: &Seq2SeqModel<f32>, examples: &[Example]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let lp = model.forward_teacher_forced(&ex.src, &ex.tgt, ex.lang()?)?;
        let v = lp.shape()[1];
        for (t, &target) in ex.tgt[1..].iter().enumerate() {
            let row = &lp.data()[t * v..(t + 1) * v];
            hits += usize::from(crate::model::argmax(row) == target as usize);
            total += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

/// Teacher-forced training of one model on `train`, selecting the epoch with
/// the lowest mean validation NLL.
pub fn train_seq2seq(
    model: &mut Seq2SeqModel<f32>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    fit(
        model,
        train,
        cfg,
        |m: &Seq2SeqModel<f32>, tape: &mut Tape<f32>, ex: &Example, seed| {
            let bound = m.bind_for_training(tape, true, seed);
            let loss = bound.nll(tape, SourceInput::Tokens(&ex.src), &ex.tgt, ex.lang()?)?;
            Ok(Some(StepLoss {
                loss,
                vars: vec![Some(bound.param_vars().to_vec())],
                breakdown: None,
            }))
        },
        |m| mean_nll(m, val),
    )
}

fn single_run(
    kind: &str,
    model: &mut Seq2SeqModel<f32>,
    train: Vec<Example>,
    val: Vec<Example>,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    let mut report = RunReport::new(kind, json!({ "train": cfg, "model": model.config() }));
    let outcome = train_seq2seq(model, &train, &val, cfg)?;
    report.absorb(kind, outcome);
    report
        .extra
        .insert("val_token_accuracy".into(), json!(teacher_forced_accuracy(model, &val)?));
    Ok(report)
}

/// Trains `doc → summary_src`.
pub fn pretrain_sum(
    model: &mut Seq2SeqModel<f32>,
    train: &[XlsRecord],
    val: &[XlsRecord],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    single_run(
        "pretrain-sum",
        model,
        train.iter().map(Example::summarization).collect(),
        val.iter().map(Example::summarization).collect(),
        cfg,
    )
}

/// Trains `summary_src → summary_tgt` (forward) or the reverse.
pub fn pretrain_tra(
    model: &mut Seq2SeqModel<f32>,
    train: &[XlsRecord],
    val: &[XlsRecord],
    cfg: &TrainConfig,
    direction: Direction,
) -> Result<RunReport> {
    let kind = match direction {
        Direction::Forward => "pretrain-tra-forward",
        Direction::Reverse => "pretrain-tra-reverse",
    };
    single_run(
        kind,
        model,
        train.iter().map(|r| Example::translation(r, direction)).collect(),
        val.iter().map(|r| Example::translation(r, direction)).collect(),
        cfg,
    )
}

/// Single-model baseline. The architecture is the same in every regime.
pub fn train_direct_baseline(
    model: &mut Seq2SeqModel<f32>,
    train: &[XlsRecord],
    val: &[XlsRecord],
    cfg: &TrainConfig,
    regime: Regime,
) -> Result<RunReport> {
    let mut report = RunReport::new(
        &format!("direct-{regime}"),
        json!({ "train": cfg, "model": model.config() }),
    );
    report.extra.insert("regime".into(), json!(regime));
    let mono_train: Vec<Example> = train.iter().map(Example::summarization).collect();
    let mono_val: Vec<Example> = val.iter().map(Example::summarization).collect();
    let xls_train: Vec<Example> = train.iter().map(Example::xls).collect();
    let xls_val: Vec<Example> = val.iter().map(Example::xls).collect();
    if matches!(regime, Regime::MonoOnly | Regime::MonoThenXls) {
        let outcome = train_seq2seq(model, &mono_train, &mono_val, cfg)?;
        report.absorb("mono", outcome);
    }
    if matches!(regime, Regime::Xls | Regime::MonoThenXls) {
        let outcome = train_seq2seq(model, &xls_train, &xls_val, cfg)?;
        report.absorb("xls", outcome);
    }
    let probe = if regime == Regime::MonoOnly { &mono_val } else { &xls_val };
    report
        .extra
        .insert("val_token_accuracy".into(), json!(teacher_forced_accuracy(model, probe)?));
    Ok(report)
}

/// Fine-tunes a direct model on `doc → summary_tgt` shots.
pub fn finetune_direct(
    model: &mut Seq2SeqModel<f32>,
    shots: &[XlsRecord],
    val: &[XlsRecord],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    if shots.is_empty() {
        return Err(Error::contract("fine-tuning needs at least one shot"));
    }
    let mut report = RunReport::new("finetune-direct", json!({ "train": cfg, "model": model.config() }));
    let train: Vec<Example> = shots.iter().map(Example::xls).collect();
    let val: Vec<Example> = val.iter().map(Example::xls).collect();
    let outcome = train_seq2seq(model, &train, &val, cfg)?;
    report.absorb("finetune", outcome);
    report.extra.insert("shots".into(), json!(shots.len()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktranslationReport {
    pub filled: usize,
    /// Records without a target-language reference.
    pub skipped_missing: usize,
    /// Decodes that hit the length cap and got an `EOS` appended.
    pub unterminated: usize,
    /// Mean source-language purity of the generated references.
    pub language_purity: f64,
    /// Purity fell below 1.
    pub flagged: bool,
}

/// Fills `backtranslation` with the reverse translator's greedy decode of
/// `summary_tgt`. Existing values are overwritten.
pub fn generate_backtranslations(
    records: &mut [XlsRecord],
    reverse: &Seq2SeqModel<f32>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<BacktranslationReport> {
    let cap = max_len.min(reverse.config().max_tgt_len.saturating_sub(1)).max(1);
    let mut report = BacktranslationReport {
        filled: 0,
        skipped_missing: 0,
        unterminated: 0,
        language_purity: 1.0,
        flagged: false,
    };
    let mut purity_total = 0.0;
    for r in records.iter_mut() {
        if r.summary_tgt.is_empty() {
            report.skipped_missing += 1;
            continue;
        }
        let mut y_hat = vec![LANG_SRC];
        y_hat.extend(reverse.generate(&r.summary_tgt, LANG_SRC, cap)?);
        if y_hat.last() != Some(&EOS) {
            y_hat.push(EOS);
            report.unterminated += 1;
        }
        purity_total += language_purity(&y_hat, vocab, Lang::Src);
        r.backtranslation = Some(y_hat);
        report.filled += 1;
    }
    if report.skipped_missing > 0 {
        log::warn!("{} records without a reference were skipped", report.skipped_missing);
    }
    if report.filled > 0 {
        report.language_purity = purity_total / report.filled as f64;
    }
    report.flagged = report.language_purity < 1.0;
    Ok(report)
}

fn pipeline_mean_loss(pipeline: &SumTraPipeline<f32>, records: &[XlsRecord], alpha: f64) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in records {
        let mut tape = Tape::new();
        let bound = pipeline.bind(&mut tape, false, false);
        match bound.loss(&mut tape, &r.doc, &r.summary_tgt, r.backtranslation.as_deref(), alpha) {
            Ok((_, b)) => {
                total += b.combined;
                count += 1;
            }
            Err(Error::DegenerateSummary) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn require_backtranslations(records: &[XlsRecord], what: &str) -> Result<()> {
    if let Some(i) = records.iter().position(|r| r.backtranslation.is_none()) {
        return Err(Error::contract(format!(
            "{what} record {i} has no back-translated reference but alpha > 0; \
             run `backtranslate` on the dataset first"
        )));
    }
    Ok(())
}

/// Fine-tunes the pipeline on the mixed objective. Frozen modules are left
/// bitwise unchanged; records whose summary is immediately `EOS` are skipped
/// and counted.
pub fn finetune(
    pipeline: &mut SumTraPipeline<f32>,
    shots: &[XlsRecord],
    val: &[XlsRecord],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::contract("fine-tuning needs at least one shot; k = 0 is plain evaluation"));
    }
    if cfg.alpha > 0.0 {
        require_backtranslations(shots, "training")?;
        require_backtranslations(val, "validation")?;
    }
    pipeline.set_alpha(cfg.alpha)?;
    let mut report = RunReport::new(
        "finetune",
        json!({
            "train": cfg,
            "sum_model": pipeline.sum().config(),
            "tra_model": pipeline.tra().config(),
            "summary_max_len": pipeline.summary_max_len(),
        }),
    );
    let (train_sum, train_tra) = (cfg.freeze_strategy.trains_sum(), cfg.freeze_strategy.trains_tra());
    let alpha = cfg.alpha;
    let before = pipeline_mean_loss(pipeline, shots, alpha)?;
    let outcome = fit(
        pipeline,
        shots,
        cfg,
        |p: &SumTraPipeline<f32>, tape: &mut Tape<f32>, r: &XlsRecord, seed| {
            let bound = p.bind_for_training(tape, train_sum, train_tra, seed);
            match bound.loss(tape, &r.doc, &r.summary_tgt, r.backtranslation.as_deref(), alpha) {
                Ok((loss, breakdown)) => Ok(Some(StepLoss {
                    loss,
                    vars: vec![
                        train_sum.then(|| bound.sum.param_vars().to_vec()),
                        train_tra.then(|| bound.tra.param_vars().to_vec()),
                    ],
                    breakdown: Some(breakdown),
                })),
                Err(Error::DegenerateSummary) => Ok(None),
                Err(e) => Err(e),
            }
        },
        |p| pipeline_mean_loss(p, val, alpha),
    )?;
    report.absorb("finetune", outcome);
    let after = pipeline_mean_loss(pipeline, shots, alpha)?;
    report.extra.insert("shots".into(), json!(shots.len()));
    report.extra.insert("alpha".into(), json!(alpha));
    report.extra.insert("freeze_strategy".into(), json!(cfg.freeze_strategy));
    report.extra.insert("train_loss_before".into(), json!(before));
    report.extra.insert("train_loss_after".into(), json!(after));
    Ok(report)
}
