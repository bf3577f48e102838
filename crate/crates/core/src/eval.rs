//! ROUGE over token ids, exact match, token accuracy, language purity and
//! inference timing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::pipeline::{InferenceMode, SumTraPipeline};
use crate::tasks::{Lang, Token, Vocab, XlsRecord, LANG_TGT};

/// Drops specials, language tags and markers.
pub fn content(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().copied().filter(|&t| !Vocab::is_special(t)).collect()
}

fn f1(overlap: usize, n_pred: usize, n_ref: usize) -> f64 {
    if overlap == 0 || n_pred == 0 || n_ref == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_pred as f64;
    let r = overlap as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-N F1 with clipped n-gram counts.
pub fn rouge_n(pred: &[Token], reference: &[Token], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    let (pred, reference) = (content(pred), content(reference));
    let pc = ngram_counts(&pred, n);
    let rc = ngram_counts(&reference, n);
    let overlap = pc
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    let n_pred = pred.len().saturating_sub(n - 1);
    let n_ref = reference.len().saturating_sub(n - 1);
    f1(overlap, n_pred, n_ref)
}

fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut diag = 0;
        for (j, &y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(pred: &[Token], reference: &[Token]) -> f64 {
    let (pred, reference) = (content(pred), content(reference));
    f1(lcs_len(&pred, &reference), pred.len(), reference.len())
}

/// Share of content tokens that belong to `lang`; 1 when there are none.
pub fn language_purity(tokens: &[Token], vocab: &Vocab, lang: Lang) -> f64 {
    let range = vocab.range(lang);
    let content: Vec<Token> = content(tokens);
    if content.is_empty() {
        return 1.0;
    }
    content.iter().filter(|t| range.contains(t)).count() as f64 / content.len() as f64
}

pub fn exact_match(pred: &[Token], reference: &[Token]) -> bool {
    content(pred) == content(reference)
}

/// Position-wise agreement of the content sequences over the longer length.
pub fn token_accuracy(pred: &[Token], reference: &[Token]) -> f64 {
    let (pred, reference) = (content(pred), content(reference));
    let len = pred.len().max(reference.len());
    if len == 0 {
        return 1.0;
    }
    pred.iter().zip(&reference).filter(|(a, b)| a == b).count() as f64 / len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub language_purity: f64,
}

pub fn score(pred: &[Token], reference: &[Token], vocab: &Vocab, lang: Lang) -> SampleScores {
    SampleScores {
        rouge1: rouge_n(pred, reference, 1),
        rouge2: rouge_n(pred, reference, 2),
        rouge_l: rouge_l(pred, reference),
        exact_match: if exact_match(pred, reference) { 1.0 } else { 0.0 },
        token_accuracy: token_accuracy(pred, reference),
        language_purity: language_purity(pred, vocab, lang),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub rouge_avg: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub language_purity: f64,
    pub n_samples: usize,
    pub per_sample_time_s: f64,
}

impl MetricReport {
    pub fn from_samples(samples: &[SampleScores]) -> Self {
        let n = samples.len();
        let mean = |f: fn(&SampleScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let rouge1 = mean(|s| s.rouge1);
        let rouge2 = mean(|s| s.rouge2);
        let rouge_l = mean(|s| s.rouge_l);
        Self {
            rouge1,
            rouge2,
            rouge_l,
            rouge_avg: (rouge1 + rouge2 + rouge_l) / 3.0,
            exact_match: mean(|s| s.exact_match),
            token_accuracy: mean(|s| s.token_accuracy),
            language_purity: mean(|s| s.language_purity),
            n_samples: n,
            per_sample_time_s: 0.0,
        }
    }
}

/// Something that maps a document to a target-language sequence.
#[derive(Clone, Copy)]
pub enum System<'a> {
    /// One model decoding `x → y` directly from `LANG_TGT`.
    Direct { model: &'a Seq2SeqModel<f32>, max_len: usize },
    Pipeline { pipeline: &'a SumTraPipeline<f32>, mode: InferenceMode },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub target: Vec<Token>,
    /// Intermediate source-language summary (pipelines only).
    pub summary: Option<Vec<Token>>,
}

impl System<'_> {
    pub fn vocab_size(&self) -> usize {
        match self {
            System::Direct { model, .. } => model.config().vocab_size,
            System::Pipeline { pipeline, .. } => pipeline.vocab().size(),
        }
    }

    pub fn predict(&self, x: &[Token]) -> Result<Prediction> {
        match *self {
            System::Direct { model, max_len } => {
                let mut target = vec![LANG_TGT];
                target.extend(model.generate(x, LANG_TGT, max_len)?);
                Ok(Prediction { target, summary: None })
            }
            System::Pipeline { pipeline, mode } => {
                let out = pipeline.infer(x, mode)?;
                Ok(Prediction {
                    target: out.target,
                    summary: Some(out.summary),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<Prediction>,
    pub samples: Vec<SampleScores>,
}

/// Decodes every record and scores it against `summary_tgt`.
pub fn evaluate(system: System<'_>, records: &[XlsRecord], vocab: &Vocab) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(records.len());
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let pred = system
            .predict(&r.doc)
            .map_err(|e| Error::State(format!("record {i}: {e}")))?;
        samples.push(score(&pred.target, &r.summary_tgt, vocab, Lang::Tgt));
        predictions.push(pred);
    }
    Ok(Evaluation {
        report: MetricReport::from_samples(&samples),
        predictions,
        samples,
    })
}

/// Scores precomputed predictions.
pub fn evaluate_predictions(predictions: &[Vec<Token>], references: &[Vec<Token>], vocab: &Vocab) -> MetricReport {
    let samples: Vec<SampleScores> = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| score(p, r, vocab, Lang::Tgt))
        .collect();
    MetricReport::from_samples(&samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub per_sample_time_s: f64,
    /// Variance of the per-repetition means.
    pub variance: f64,
    pub repetitions: Vec<f64>,
    pub n_samples: usize,
}

/// Mean wall-clock seconds per document over `repetitions` passes, after
/// one untimed warm-up pass. Only the decode calls are timed.
pub fn time_inference(system: System<'_>, records: &[XlsRecord], repetitions: usize) -> Result<Timing> {
    if records.is_empty() {
        return Err(Error::contract("timing needs at least one record"));
    }
    if repetitions == 0 {
        return Err(Error::contract("timing needs at least one repetition"));
    }
    for r in records {
        std::hint::black_box(system.predict(&r.doc)?);
    }
    let mut per_rep = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let mut total = 0.0;
        for r in records {
            let start = Instant::now();
            let out = system.predict(&r.doc)?;
            total += start.elapsed().as_secs_f64();
            std::hint::black_box(out);
        }
        per_rep.push(total / records.len() as f64);
    }
    let mean = per_rep.iter().sum::<f64>() / repetitions as f64;
    let variance = per_rep.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repetitions as f64;
    Ok(Timing {
        per_sample_time_s: mean,
        variance,
        repetitions: per_rep,
        n_samples: records.len(),
    })
}

/// Aligned plain-text table, metrics ×100 with two decimals.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(3);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>9}  {:>7}  {:>7}  {:>7}  {:>5}",
        "run", "R-1", "R-2", "R-L", "R-avg", "EM", "TokAcc", "Purity", "n"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>9.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>5}",
            name,
            100.0 * m.rouge1,
            100.0 * m.rouge2,
            100.0 * m.rouge_l,
            100.0 * m.rouge_avg,
            100.0 * m.exact_match,
            100.0 * m.token_accuracy,
            100.0 * m.language_purity,
            m.n_samples
        );
    }
    out
}

/// One CSV row per sample.
pub fn samples_csv(samples: &[SampleScores]) -> String {
    let mut out = String::from("index,rouge1,rouge2,rougeL,exact_match,token_accuracy,language_purity\n");
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            s.rouge1, s.rouge2, s.rouge_l, s.exact_match, s.token_accuracy, s.language_purity
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const A: Token = 10;
    const B: Token = 11;
    const C: Token = 12;
    const D: Token = 13;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_n(&[A, B, C], &[A, B, C], 1), 1.0);
        assert_eq!(rouge_l(&[A, B, C], &[A, B, C]), 1.0);
        assert!((rouge_n(&[A, B, C], &[A, B, D], 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((rouge_n(&[A, B, C], &[A, B, D], 2) - 0.5).abs() < 1e-15);
        assert_eq!(rouge_n(&[A, B], &[C, D], 1), 0.0);
        assert!((rouge_l(&[A, C, B], &[A, B, C]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l(&[], &[A, B]), 0.0);
    }

    #[test]
    fn rouge_ignores_specials() {
        assert_eq!(rouge_n(&[5, A, B, 2], &[A, B], 2), 1.0);
        assert_eq!(rouge_n(&[A], &[A], 2), 0.0);
    }

    #[test]
    fn purity_examples() {
        let v = Vocab::new(32);
        assert_eq!(language_purity(&[5, 40, 41, 2], &v, Lang::Tgt), 1.0);
        assert_eq!(language_purity(&[5, 10, 41, 2], &v, Lang::Tgt), 0.5);
        assert_eq!(language_purity(&[5, 2], &v, Lang::Tgt), 1.0);
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let v = Vocab::new(32);
        let refs = vec![vec![5, 40, 41, EOS_T], vec![5, 60, EOS_T]];
        let report = evaluate_predictions(&refs, &refs, &v);
        assert_eq!(report.rouge1, 1.0);
        assert_eq!(report.rouge2, 0.5);
        assert_eq!(report.rouge_l, 1.0);
        assert_eq!(report.exact_match, 1.0);
        assert_eq!(report.rouge_avg, (report.rouge1 + report.rouge2 + report.rouge_l) / 3.0);
    }

    const EOS_T: Token = crate::tasks::EOS;

    #[test]
    fn table_has_one_line_per_run() {
        let t = format_table(&[("a".into(), MetricReport::default()), ("bb".into(), MetricReport::default())]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("0.00"));
    }

    fn seq() -> impl Strategy<Value = Vec<Token>> {
        prop::collection::vec(8u32..14, 0..12)
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in seq(), b in seq()) {
            prop_assert_eq!(rouge_n(&a, &b, 1), rouge_n(&b, &a, 1));
            prop_assert_eq!(rouge_n(&a, &b, 2), rouge_n(&b, &a, 2));
            prop_assert_eq!(rouge_l(&a, &b), rouge_l(&b, &a));
        }

        #[test]
        fn metrics_are_bounded(a in seq(), b in seq()) {
            let s = score(&a, &b, &Vocab::new(32), Lang::Src);
            for v in [s.rouge1, s.rouge2, s.rouge_l, s.exact_match, s.token_accuracy, s.language_purity] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if s.exact_match == 1.0 && !content(&a).is_empty() {
                prop_assert_eq!(s.rouge1, 1.0);
            }
        }
    }
}
