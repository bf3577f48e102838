//! Finite-difference check of the whole pipeline objective on a tiny config.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2SeqModel, SourceInput};
use crate::pipeline::SumTraPipeline;
use crate::tasks::{gen_document, summarize_oracle, translate_oracle, Token, ToyTaskSpec, LANG_SRC};
use crate::tensor::{grad_check, Tape, Var};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SUMMARY_CAP: usize = 4;

/// Greedy choices closer than this are skipped: a finite-difference step
/// could flip the argmax and the objective is not differentiable there.
const MIN_ARGMAX_MARGIN: f64 = 1e-3;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers_enc: 1,
        n_layers_dec: 1,
        ffn_dim: 16,
        max_src_len: 16,
        max_tgt_len: 8,
        dropout: 0.0,
    }
}

/// `C = 4` gives `V = 16`; two pairs give documents of length 6.
pub fn tiny_task_spec() -> ToyTaskSpec {
    ToyTaskSpec {
        content_size: 4,
        n_pairs: 2,
        ..ToyTaskSpec::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub alpha: f64,
    pub eps: f64,
    pub parameters: usize,
    pub document: Vec<Token>,
    pub summary: Vec<Token>,
    pub max_relative_error: f64,
    pub seconds: f64,
    pub passed: bool,
}

fn min_margin(pipeline: &SumTraPipeline<f64>, x: &[Token]) -> Result<(Vec<Token>, f64)> {
    let mut tape = Tape::new();
    let bound = pipeline.sum().bind(&mut tape, false);
    let decode = bound.greedy_decode(&mut tape, SourceInput::Tokens(x), LANG_SRC, pipeline.summary_max_len())?;
    let mut margin = f64::INFINITY;
    for &p in &decode.prob_vectors {
        let mut sorted = tape.value(p).data().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(sorted[0] - sorted[1]);
    }
    Ok((decode.tokens, margin))
}

/// Starting at `seed`, picks the first model/document draw whose greedy
/// summary is non-empty and has clear argmax margins, then compares the
/// autodiff gradient of the mixed loss against central differences over
/// every parameter of both models.
pub fn pipeline_gradcheck(seed: u64, alpha: f64) -> Result<GradcheckReport> {
    let spec = tiny_task_spec();
    let cfg = tiny_model_config();
    for attempt in seed..seed + 64 {
        let sum = Seq2SeqModel::<f64>::new(cfg.clone(), attempt)?;
        let tra = Seq2SeqModel::<f64>::new(cfg.clone(), attempt.wrapping_add(1 << 32))?;
        let pipeline = SumTraPipeline::new(sum, tra, spec.vocab(), GRADCHECK_SUMMARY_CAP)?;
        let x = gen_document(&spec, &mut ChaCha8Rng::seed_from_u64(attempt));
        let (tokens, margin) = min_margin(&pipeline, &x)?;
        if tokens.first().is_none_or(|&t| t == crate::tasks::EOS) || margin < MIN_ARGMAX_MARGIN {
            continue;
        }
        let s = summarize_oracle(&spec, &x)?;
        let y = translate_oracle(&spec, &s)?;
        let params = pipeline.parameter_tensors();
        let start = Instant::now();
        let err = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let bound = pipeline.bind_vars(tape, vars)?;
                bound.loss(tape, &x, &y, Some(&s), alpha).map(|(l, _)| l)
            },
            &params,
            GRADCHECK_EPS,
        )?;
        return Ok(GradcheckReport {
            seed: attempt,
            alpha,
            eps: GRADCHECK_EPS,
            parameters: params.iter().map(|p| p.len()).sum(),
            document: x,
            summary: tokens,
            max_relative_error: err,
            seconds: start.elapsed().as_secs_f64(),
            passed: err <= GRADCHECK_TOLERANCE,
        });
    }
    Err(Error::Numeric(format!(
        "no usable draw in seeds {seed}..{}",
        seed + 64
    )))
}
