//! Summarize-then-translate with a differentiable coupling.
//!
//! The summarizer decodes greedily; each step's probability vector `p_j` is
//! mapped to `e_j = E·p_j` with the translator's embedding matrix and fed to
//! the translator encoder in place of token lookups. The resulting NLL reaches
//! both models through `p_j`.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_pipeline, pipeline_from_bytes, pipeline_to_bytes, save_pipeline, PIPELINE_MAGIC,
};

use crate::error::{Error, Result};
use crate::model::{Bound, Seq2SeqModel, SourceInput, StopReason};
use crate::tasks::{Token, Vocab, EOS, LANG_SRC, LANG_TGT};
use crate::tensor::{Float, Tape, Var};

pub const DEFAULT_ALPHA: f64 = 0.99;

/// Room left above the longest oracle summary when capping the summarizer.
pub const SUMMARY_SLACK: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    #[default]
    Hard,
    Soft,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(Error::contract(format!("unknown inference mode `{other}` (hard|soft)"))),
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SumTraPipeline<F> {
    sum: Seq2SeqModel<F>,
    tra: Seq2SeqModel<F>,
    vocab: Vocab,
    summary_max_len: usize,
    alpha: f64,
}

/// The summarizer's free-running decode as recorded on a tape.
#[derive(Debug, Clone)]
pub struct SoftSummary {
    pub tokens: Vec<Token>,
    pub prob_vectors: Vec<Var>,
    /// `m×D`, row `j` is `E·p_j`.
    pub expected_embeddings: Var,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    /// Absent when no back-translation was supplied and `alpha == 0`.
    pub nll_sum: Option<f64>,
    pub combined: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    /// Checks non-negativity and that `combined` lies between its parts.
    /// The slack covers rounding of the two scaled terms in `f32`.
    pub fn check(&self) -> Result<()> {
        let parts = [Some(self.nll), self.nll_sum, Some(self.combined)];
        if parts.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(format!("loss out of range: {self:?}")));
        }
        let (lo, hi) = match self.nll_sum {
            Some(s) if self.alpha > 0.0 && self.alpha < 1.0 => (s.min(self.nll), s.max(self.nll)),
            Some(s) if self.alpha == 1.0 => (s, s),
            _ => (self.nll, self.nll),
        };
        let slack = 1e-6 * hi.abs().max(1.0);
        if self.combined < lo - slack || self.combined > hi + slack {
            return Err(Error::Numeric(format!(
                "combined loss {} outside [{lo}, {hi}]",
                self.combined
            )));
        }
        Ok(())
    }
}

/// Result of running the full pipeline in eval mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inference {
    /// `LANG_TGT` followed by the translator's decode.
    pub target: Vec<Token>,
    /// `LANG_SRC` followed by the summarizer's decode.
    pub summary: Vec<Token>,
}

/// `e_j = E·p_j` for every row of the stacked probability vectors.
pub fn expected_embeddings<F: Float>(tape: &mut Tape<F>, prob_vectors: &[Var], embedding: Var) -> Result<Var> {
    if prob_vectors.is_empty() {
        return Err(Error::contract("no probability vectors"));
    }
    let p = tape.concat_rows(prob_vectors)?;
    let (_, v) = tape.value(p).dims2()?;
    let (d, ev) = tape.value(embedding).dims2()?;
    if v != ev {
        return Err(Error::Dimension {
            op: "expected_embeddings",
            lhs: tape.shape(p).to_vec(),
            rhs: vec![d, ev],
        });
    }
    let et = tape.transpose(embedding)?;
    tape.matmul(p, et)
}

/// `alpha·nll_sum + (1 − alpha)·nll`. At the endpoints the unused operand is
/// left off the graph, so its parameters get no gradient at all.
pub fn mixed_loss<F: Float>(tape: &mut Tape<F>, nll_sum: Option<Var>, nll: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(nll);
    }
    let nll_sum = nll_sum.ok_or_else(|| {
        Error::contract("alpha > 0 needs a back-translated reference; run backtranslate first")
    })?;
    if alpha == 1.0 {
        return Ok(nll_sum);
    }
    let a = tape.scale(nll_sum, F::lit(alpha));
    let b = tape.scale(nll, F::lit(1.0 - alpha));
    tape.add(a, b)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

fn is_degenerate(tokens: &[Token]) -> bool {
    tokens.first().is_none_or(|&t| t == EOS)
}

impl<F: Float> SumTraPipeline<F> {
    pub fn new(sum: Seq2SeqModel<F>, tra: Seq2SeqModel<F>, vocab: Vocab, summary_max_len: usize) -> Result<Self> {
        let (s, t) = (sum.config(), tra.config());
        if s.vocab_size != t.vocab_size || s.vocab_size != vocab.size() {
            return Err(Error::contract(format!(
                "vocabulary sizes differ: sum {}, tra {}, vocab {}",
                s.vocab_size,
                t.vocab_size,
                vocab.size()
            )));
        }
        if s.d_model != t.d_model {
            return Err(Error::contract(format!(
                "d_model differs: sum {}, tra {}",
                s.d_model, t.d_model
            )));
        }
        if summary_max_len == 0 || summary_max_len > s.max_tgt_len.min(t.max_tgt_len) {
            return Err(Error::contract(format!(
                "summary_max_len {summary_max_len} must be in 1..={}",
                s.max_tgt_len.min(t.max_tgt_len)
            )));
        }
        Ok(Self {
            sum,
            tra,
            vocab,
            summary_max_len,
            alpha: DEFAULT_ALPHA,
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.set_alpha(alpha)?;
        Ok(self)
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn summary_max_len(&self) -> usize {
        self.summary_max_len
    }

    pub fn sum(&self) -> &Seq2SeqModel<F> {
        &self.sum
    }

    pub fn tra(&self) -> &Seq2SeqModel<F> {
        &self.tra
    }

    pub fn sum_mut(&mut self) -> &mut Seq2SeqModel<F> {
        &mut self.sum
    }

    pub fn tra_mut(&mut self) -> &mut Seq2SeqModel<F> {
        &mut self.tra
    }

    pub fn modules_mut(&mut self) -> (&mut Seq2SeqModel<F>, &mut Seq2SeqModel<F>) {
        (&mut self.sum, &mut self.tra)
    }

    pub fn into_parts(self) -> (Seq2SeqModel<F>, Seq2SeqModel<F>) {
        (self.sum, self.tra)
    }

    pub fn cast<G: Float>(&self) -> SumTraPipeline<G> {
        SumTraPipeline {
            sum: self.sum.cast(),
            tra: self.tra.cast(),
            vocab: self.vocab,
            summary_max_len: self.summary_max_len,
            alpha: self.alpha,
        }
    }

    /// Records both models on `tape`; a `false` flag freezes that module.
    pub fn bind<'p>(&'p self, tape: &mut Tape<F>, train_sum: bool, train_tra: bool) -> BoundPipeline<'p, F> {
        BoundPipeline {
            pipeline: self,
            sum: self.sum.bind(tape, train_sum),
            tra: self.tra.bind(tape, train_tra),
        }
    }

    /// Binds to handles already on the tape: the summarizer's parameters
    /// followed by the translator's.
    pub fn bind_vars<'p>(&'p self, tape: &Tape<F>, vars: &[Var]) -> Result<BoundPipeline<'p, F>> {
        let n = self.sum.params().len();
        if vars.len() < n {
            return Err(Error::contract("too few parameter handles"));
        }
        Ok(BoundPipeline {
            pipeline: self,
            sum: self.sum.bind_vars(tape, &vars[..n])?,
            tra: self.tra.bind_vars(tape, &vars[n..])?,
        })
    }

    /// All parameter tensors, summarizer first.
    pub fn parameter_tensors(&self) -> Vec<crate::tensor::Tensor<F>> {
        self.sum
            .params()
            .iter()
            .chain(self.tra.params())
            .map(|p| p.tensor.clone())
            .collect()
    }

    /// Like [`SumTraPipeline::bind`] with dropout active when configured.
    pub fn bind_for_training<'p>(
        &'p self,
        tape: &mut Tape<F>,
        train_sum: bool,
        train_tra: bool,
        seed: u64,
    ) -> BoundPipeline<'p, F> {
        BoundPipeline {
            pipeline: self,
            sum: self.sum.bind_for_training(tape, train_sum, seed),
            tra: self.tra.bind_for_training(tape, train_tra, seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    /// Summarizes then translates `x`. A summary that is only `EOS` yields an
    /// empty translation.
    pub fn infer(&self, x: &[Token], mode: InferenceMode) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        bound.infer(&mut tape, x, mode)
    }

    /// Summarizer decode alone, for inspection.
    pub fn summarize(&self, x: &[Token]) -> Result<Vec<Token>> {
        let mut summary = vec![LANG_SRC];
        summary.extend(self.sum.generate(x, LANG_SRC, self.summary_max_len)?);
        Ok(summary)
    }
}

/// A pipeline whose parameters have been recorded on a tape.
pub struct BoundPipeline<'p, F> {
    pipeline: &'p SumTraPipeline<F>,
    pub sum: Bound<'p, F>,
    pub tra: Bound<'p, F>,
}

impl<'p, F: Float> BoundPipeline<'p, F> {
    pub fn pipeline(&self) -> &'p SumTraPipeline<F> {
        self.pipeline
    }

    /// Greedy summarizer decode plus expected embeddings against the
    /// translator's `E`.
    pub fn soft_summary(&self, tape: &mut Tape<F>, x: &[Token]) -> Result<SoftSummary> {
        let decode = self
            .sum
            .greedy_decode(tape, SourceInput::Tokens(x), LANG_SRC, self.pipeline.summary_max_len)?;
        let expected = expected_embeddings(tape, &decode.prob_vectors, self.tra.embedding())?;
        Ok(SoftSummary {
            tokens: decode.tokens,
            prob_vectors: decode.prob_vectors,
            expected_embeddings: expected,
            stop_reason: decode.stop_reason,
        })
    }

    /// Translator input rows: the source tag's embedding followed by `e_1..e_m`.
    fn translator_rows(&self, tape: &mut Tape<F>, soft: &SoftSummary) -> Result<Var> {
        let tag = self.tra.embed_tokens(tape, &[LANG_SRC])?;
        tape.concat_rows(&[tag, soft.expected_embeddings])
    }

    /// Cross-lingual NLL of `y` with the translator reading expected
    /// embeddings of the summarizer's decode.
    pub fn xls_forward(&self, tape: &mut Tape<F>, x: &[Token], y: &[Token]) -> Result<(Var, SoftSummary)> {
        if y.first() != Some(&LANG_TGT) {
            return Err(Error::contract("reference must start with the target language tag"));
        }
        let soft = self.soft_summary(tape, x)?;
        if is_degenerate(&soft.tokens) {
            return Err(Error::DegenerateSummary);
        }
        let rows = self.translator_rows(tape, &soft)?;
        let nll = self.tra.nll(tape, SourceInput::Embeddings(rows), y, LANG_TGT)?;
        Ok((nll, soft))
    }

    /// Teacher-forced summarizer NLL against the back-translated reference.
    pub fn backtranslation_loss(&self, tape: &mut Tape<F>, x: &[Token], y_hat: &[Token]) -> Result<Var> {
        self.sum.nll(tape, SourceInput::Tokens(x), y_hat, LANG_SRC)
    }

    /// Mixed objective for one record.
    pub fn loss(
        &self,
        tape: &mut Tape<F>,
        x: &[Token],
        y: &[Token],
        y_hat: Option<&[Token]>,
        alpha: f64,
    ) -> Result<(Var, LossBreakdown)> {
        check_alpha(alpha)?;
        if alpha > 0.0 && y_hat.is_none() {
            return Err(Error::contract(
                "alpha > 0 needs a back-translated reference; run backtranslate first",
            ));
        }
        let (nll, _) = self.xls_forward(tape, x, y)?;
        let nll_sum = match y_hat {
            Some(y_hat) => Some(self.backtranslation_loss(tape, x, y_hat)?),
            None => None,
        };
        let combined = mixed_loss(tape, nll_sum, nll, alpha)?;
        let breakdown = LossBreakdown {
            nll: tape.value(nll).item().as_f64(),
            nll_sum: nll_sum.map(|v| tape.value(v).item().as_f64()),
            combined: tape.value(combined).item().as_f64(),
            alpha,
        };
        Ok((combined, breakdown))
    }

    pub fn infer(&self, tape: &mut Tape<F>, x: &[Token], mode: InferenceMode) -> Result<Inference> {
        let cap = self.pipeline.summary_max_len;
        let mut summary = vec![LANG_SRC];
        let mut target = vec![LANG_TGT];
        let translation = match mode {
            InferenceMode::Hard => {
                let decode = self.sum.greedy_decode(tape, SourceInput::Tokens(x), LANG_SRC, cap)?;
                summary.extend(&decode.tokens);
                if is_degenerate(&decode.tokens) {
                    return Ok(Inference { target, summary });
                }
                self.tra.greedy_decode(tape, SourceInput::Tokens(&summary), LANG_TGT, cap)?
            }
            InferenceMode::Soft => {
                let soft = self.soft_summary(tape, x)?;
                summary.extend(&soft.tokens);
                if is_degenerate(&soft.tokens) {
                    return Ok(Inference { target, summary });
                }
                let rows = self.translator_rows(tape, &soft)?;
                self.tra.greedy_decode(tape, SourceInput::Embeddings(rows), LANG_TGT, cap)?
            }
        };
        target.extend(translation.tokens);
        Ok(Inference { target, summary })
    }
}
