use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Attention, FeedForward, Linear, Norm, Seq2SeqModel};
use crate::error::{Error, Result};
use crate::tasks::{Token, EOS};
use crate::tensor::{Float, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Encoder input: token ids, or rows already in embedding space (`len×D`).
#[derive(Debug, Clone, Copy)]
pub enum SourceInput<'a> {
    Tokens(&'a [Token]),
    Embeddings(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub states: Var,
    /// The source was longer than `max_src_len` and got cut.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

/// Greedy decode recorded on a tape: each probability vector keeps its
/// history so losses computed from it reach the model parameters.
#[derive(Debug, Clone)]
pub struct GreedyDecode {
    pub tokens: Vec<Token>,
    pub prob_vectors: Vec<Var>,
    pub stop_reason: StopReason,
    pub truncated: bool,
}

/// Detached greedy decode.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyDecodeResult<F> {
    pub tokens: Vec<Token>,
    pub prob_vectors: Vec<Tensor<F>>,
    pub stop_reason: StopReason,
}

/// Cross-attention keys and values, one pair per decoder layer.
#[derive(Debug, Clone)]
pub struct Memory {
    kv: Vec<(Var, Var)>,
}

/// A model whose parameters have been recorded on a tape.
pub struct Bound<'m, F> {
    model: &'m Seq2SeqModel<F>,
    vars: Vec<Var>,
    dropout: Option<RefCell<ChaCha8Rng>>,
}

impl<F: Float> Seq2SeqModel<F> {
    /// Records every parameter as a tape leaf. Frozen parameters
    /// (`trainable == false`) receive no gradient.
    pub fn bind<'m>(&'m self, tape: &mut Tape<F>, trainable: bool) -> Bound<'m, F> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(trainable)))
            .collect();
        Bound {
            model: self,
            vars,
            dropout: None,
        }
    }

    /// Uses tape values already recorded elsewhere as this model's parameters,
    /// in declared order.
    pub fn bind_vars<'m>(&'m self, tape: &Tape<F>, vars: &[Var]) -> Result<Bound<'m, F>> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        for (p, &v) in self.params.iter().zip(vars) {
            if tape.shape(v) != p.tensor.shape() {
                return Err(Error::Dimension {
                    op: "bind_vars",
                    lhs: tape.shape(v).to_vec(),
                    rhs: p.tensor.shape().to_vec(),
                });
            }
        }
        Ok(Bound {
            model: self,
            vars: vars.to_vec(),
            dropout: None,
        })
    }

    /// Like [`Seq2SeqModel::bind`] with dropout active when configured.
    pub fn bind_for_training<'m>(&'m self, tape: &mut Tape<F>, trainable: bool, seed: u64) -> Bound<'m, F> {
        let mut bound = self.bind(tape, trainable);
        if self.config.dropout > 0.0 {
            bound.dropout = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        }
        bound
    }

    /// Contextual encoder states for `src` in eval mode.
    pub fn encode(&self, src: &[Token]) -> Result<(Tensor<F>, bool)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = bound.encode(&mut tape, SourceInput::Tokens(src))?;
        Ok((tape.value(enc.states).clone(), enc.truncated))
    }

    /// Teacher-forced log-probabilities (`T×V`, `T = tgt.len() - 1`).
    pub fn forward_teacher_forced(&self, src: &[Token], tgt: &[Token], lang_tag: Token) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let lp = bound.forward_teacher_forced(&mut tape, SourceInput::Tokens(src), tgt, lang_tag)?;
        Ok(tape.value(lp).clone())
    }

    /// Teacher-forced log-probabilities from precomputed input rows.
    pub fn forward_teacher_forced_embeddings(
        &self,
        rows: Tensor<F>,
        tgt: &[Token],
        lang_tag: Token,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let rows = tape.constant(rows);
        let lp = bound.forward_teacher_forced(&mut tape, SourceInput::Embeddings(rows), tgt, lang_tag)?;
        Ok(tape.value(lp).clone())
    }

    pub fn greedy_decode(&self, src: &[Token], lang_tag: Token, max_len: usize) -> Result<GreedyDecodeResult<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = bound.greedy_decode(&mut tape, SourceInput::Tokens(src), lang_tag, max_len)?;
        Ok(GreedyDecodeResult {
            tokens: out.tokens,
            prob_vectors: out.prob_vectors.iter().map(|&p| tape.value(p).clone()).collect(),
            stop_reason: out.stop_reason,
        })
    }

    /// Greedy output tokens `s_1..s_m` (no language tag).
    pub fn generate(&self, src: &[Token], lang_tag: Token, max_len: usize) -> Result<Vec<Token>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        Ok(bound
            .greedy_decode(&mut tape, SourceInput::Tokens(src), lang_tag, max_len)?
            .tokens)
    }
}

/// Fixed sinusoidal position table, `len×d`.
pub(crate) fn positional_encoding<F: Float>(len: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new([len, d], data).expect("positional shape")
}

fn causal_mask<F: Float>(len: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = F::neg_infinity();
        }
    }
    Tensor::new([len, len], data).expect("mask shape")
}

fn to_ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<F: Float>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<'m, F: Float> Bound<'m, F> {
    pub fn model(&self) -> &'m Seq2SeqModel<F> {
        self.model
    }

    /// Tape handles of the parameters, in declared order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// The shared embedding matrix as recorded on the tape.
    pub fn embedding(&self) -> Var {
        self.vars[self.model.layout.embed]
    }

    fn linear(&self, tape: &mut Tape<F>, x: Var, l: Linear) -> Result<Var> {
        let h = tape.matmul(x, self.vars[l.w])?;
        match l.b {
            Some(b) => tape.add_bias(h, self.vars[b]),
            None => Ok(h),
        }
    }

    fn norm(&self, tape: &mut Tape<F>, x: Var, n: Norm) -> Result<Var> {
        tape.layer_norm(x, self.vars[n.gain], self.vars[n.bias], F::lit(LN_EPS))
    }

    fn dropout(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let Some(rng) = &self.dropout else {
            return Ok(x);
        };
        let p = self.model.config.dropout;
        let keep = F::lit(1.0 / (1.0 - p));
        let mut rng = rng.borrow_mut();
        let mask: Vec<F> = (0..tape.value(x).len())
            .map(|_| if rng.random_bool(p) { F::zero() } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
        tape.mul(x, mask)
    }

    /// Token ids as rows of the embedding space (`len×D`).
    pub fn embed_tokens(&self, tape: &mut Tape<F>, tokens: &[Token]) -> Result<Var> {
        tape.embedding(self.embedding(), &to_ids(tokens))
    }

    fn input_states(&self, tape: &mut Tape<F>, rows: Var) -> Result<Var> {
        let (len, d) = tape.value(rows).dims2()?;
        if d != self.model.config.d_model {
            return Err(Error::Dimension {
                op: "input embeddings",
                lhs: vec![len, d],
                rhs: vec![len, self.model.config.d_model],
            });
        }
        let scaled = tape.scale(rows, F::lit((d as f64).sqrt()));
        let pe = tape.constant(positional_encoding(len, d));
        let x = tape.add(scaled, pe)?;
        self.dropout(tape, x)
    }

    pub fn encode(&self, tape: &mut Tape<F>, src: SourceInput<'_>) -> Result<Encoded> {
        let max = self.model.config.max_src_len;
        let (rows, truncated) = match src {
            SourceInput::Tokens(tokens) => {
                let truncated = tokens.len() > max;
                let tokens = &tokens[..tokens.len().min(max)];
                (self.embed_tokens(tape, tokens)?, truncated)
            }
            SourceInput::Embeddings(rows) => {
                let (len, _) = tape.value(rows).dims2()?;
                if len > max {
                    (tape.slice_rows(rows, 0, max)?, true)
                } else {
                    (rows, false)
                }
            }
        };
        if tape.value(rows).dims2()?.0 == 0 {
            return Err(Error::contract("empty source sequence"));
        }
        let mut x = self.input_states(tape, rows)?;
        for layer in &self.model.layout.encoder {
            let h = self.norm(tape, x, layer.ln_attn)?;
            let k = self.linear(tape, h, layer.attn.k)?;
            let v = self.linear(tape, h, layer.attn.v)?;
            let a = self.attend(tape, layer.attn, h, k, v, false)?;
            let a = self.dropout(tape, a)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, layer.ln_ffn)?;
            let f = self.feed_forward(tape, h, layer.ffn)?;
            x = tape.add(x, f)?;
        }
        let states = self.norm(tape, x, self.model.layout.enc_norm)?;
        Ok(Encoded { states, truncated })
    }

    fn feed_forward(&self, tape: &mut Tape<F>, h: Var, ffn: FeedForward) -> Result<Var> {
        let u = self.linear(tape, h, ffn.up)?;
        let u = tape.gelu(u);
        let d = self.linear(tape, u, ffn.down)?;
        self.dropout(tape, d)
    }

    /// Multi-head scaled dot-product attention of `q_in` over already
    /// projected keys and values.
    fn attend(&self, tape: &mut Tape<F>, attn: Attention, q_in: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let q = self.linear(tape, q_in, attn.q)?;
        let kt = tape.transpose(k)?;
        let (tq, _) = tape.value(q).dims2()?;
        let (tk, _) = tape.value(k).dims2()?;
        let mask = if causal {
            debug_assert_eq!(tq, tk);
            Some(tape.constant(causal_mask(tq)))
        } else {
            None
        };
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_rows(kt, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let a = tape.softmax(s, 1)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.linear(tape, o, attn.o)
    }

    pub fn memory(&self, tape: &mut Tape<F>, enc: &Encoded) -> Result<Memory> {
        let kv = self
            .model
            .layout
            .decoder
            .iter()
            .map(|layer| {
                let k = self.linear(tape, enc.states, layer.cross_attn.k)?;
                let v = self.linear(tape, enc.states, layer.cross_attn.v)?;
                Ok((k, v))
            })
            .collect::<Result<_>>()?;
        Ok(Memory { kv })
    }

    /// Pre-norm decoder residual stream over `prefix` (`len×D`).
    fn decoder_states(&self, tape: &mut Tape<F>, memory: &Memory, prefix: &[Token]) -> Result<Var> {
        let rows = self.embed_tokens(tape, prefix)?;
        let mut y = self.input_states(tape, rows)?;
        for (layer, &(mk, mv)) in self.model.layout.decoder.iter().zip(&memory.kv) {
            let h = self.norm(tape, y, layer.ln_self)?;
            let k = self.linear(tape, h, layer.self_attn.k)?;
            let v = self.linear(tape, h, layer.self_attn.v)?;
            let a = self.attend(tape, layer.self_attn, h, k, v, true)?;
            let a = self.dropout(tape, a)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, y, layer.ln_cross)?;
            let c = self.attend(tape, layer.cross_attn, h, mk, mv, false)?;
            let c = self.dropout(tape, c)?;
            y = tape.add(y, c)?;
            let h = self.norm(tape, y, layer.ln_ffn)?;
            let f = self.feed_forward(tape, h, layer.ffn)?;
            y = tape.add(y, f)?;
        }
        Ok(y)
    }

    /// Final norm and tied output projection.
    fn logits(&self, tape: &mut Tape<F>, states: Var) -> Result<Var> {
        let h = self.norm(tape, states, self.model.layout.dec_norm)?;
        tape.matmul(h, self.embedding())
    }

    fn check_target(&self, tgt: &[Token], lang_tag: Token) -> Result<()> {
        if tgt.first() != Some(&lang_tag) {
            return Err(Error::contract(format!(
                "target must start with language tag {lang_tag}, got {:?}",
                tgt.first()
            )));
        }
        if tgt.len() < 2 || tgt.last() != Some(&EOS) {
            return Err(Error::contract("target must end with EOS"));
        }
        if tgt.len() - 1 > self.model.config.max_tgt_len {
            return Err(Error::contract(format!(
                "target of {} steps exceeds max_tgt_len {}",
                tgt.len() - 1,
                self.model.config.max_tgt_len
            )));
        }
        Ok(())
    }

    /// Log-probabilities for `tgt[1..]` given `tgt[..T]` and the source.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape<F>,
        src: SourceInput<'_>,
        tgt: &[Token],
        lang_tag: Token,
    ) -> Result<Var> {
        self.check_target(tgt, lang_tag)?;
        let enc = self.encode(tape, src)?;
        let memory = self.memory(tape, &enc)?;
        let states = self.decoder_states(tape, &memory, &tgt[..tgt.len() - 1])?;
        let logits = self.logits(tape, states)?;
        tape.log_softmax(logits, 1)
    }

    /// Token-mean teacher-forced negative log-likelihood of `tgt`.
    pub fn nll(&self, tape: &mut Tape<F>, src: SourceInput<'_>, tgt: &[Token], lang_tag: Token) -> Result<Var> {
        let lp = self.forward_teacher_forced(tape, src, tgt, lang_tag)?;
        let targets = to_ids(&tgt[1..]);
        let mask = vec![true; targets.len()];
        tape.cross_entropy(lp, &targets, &mask)
    }

    /// Free-running greedy decoding from `lang_tag`. Step `j` feeds back the
    /// hard argmax token `s_{j-1}`; only the probability vectors carry
    /// gradient.
    pub fn greedy_decode(
        &self,
        tape: &mut Tape<F>,
        src: SourceInput<'_>,
        lang_tag: Token,
        max_len: usize,
    ) -> Result<GreedyDecode> {
        if max_len > self.model.config.max_tgt_len {
            return Err(Error::contract(format!(
                "max_len {max_len} exceeds max_tgt_len {}",
                self.model.config.max_tgt_len
            )));
        }
        let enc = self.encode(tape, src)?;
        let memory = self.memory(tape, &enc)?;
        let mut prefix = vec![lang_tag];
        let mut tokens = Vec::with_capacity(max_len);
        let mut prob_vectors = Vec::with_capacity(max_len);
        let mut stop_reason = StopReason::MaxLength;
        for _ in 0..max_len {
            let states = self.decoder_states(tape, &memory, &prefix)?;
            let last = tape.select_row(states, prefix.len() - 1)?;
            let logits = self.logits(tape, last)?;
            let p = tape.softmax(logits, 1)?;
            let s = argmax(tape.value(p).data()) as Token;
            tokens.push(s);
            prob_vectors.push(p);
            if s == EOS {
                stop_reason = StopReason::Eos;
                break;
            }
            prefix.push(s);
        }
        Ok(GreedyDecode {
            tokens,
            prob_vectors,
            stop_reason,
            truncated: enc.truncated,
        })
    }
}
