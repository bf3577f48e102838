//! Compact pre-norm encoder–decoder transformer.
//!
//! One embedding matrix `E` of shape `D×V` is shared by the encoder input,
//! the decoder input and the output projection. Inputs are `E` columns (or
//! any precomputed rows in the same space) scaled by `sqrt(D)` plus fixed
//! sinusoidal positions, which is what lets a caller hand the encoder a mix
//! of `E` columns instead of token ids.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, model_from_bytes, model_to_bytes, save_checkpoint, CHECKPOINT_MAGIC,
};
pub(crate) use checkpoint::model_from_prefix;
pub(crate) use forward::argmax;
pub use forward::{Bound, Encoded, GreedyDecode, GreedyDecodeResult, SourceInput, StopReason};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 72,
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            ffn_dim: 128,
            max_src_len: 64,
            max_tgt_len: 16,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("ffn_dim", self.ffn_dim),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of scalar parameters implied by the config.
    pub fn parameter_count(&self) -> usize {
        param_specs(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Embedding,
    Weight { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub ln_attn: Norm,
    pub attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

/// Indices into the flat parameter list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Norm,
}

struct Builder<'a> {
    specs: Vec<ParamSpec>,
    cfg: &'a ModelConfig,
    residual_gain: f64,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        Linear {
            w: self.push(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Weight { fan_in, gain }),
            b: Some(self.push(format!("{prefix}.b"), vec![fan_out], Init::Zeros)),
        }
    }

    fn projection(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.push(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Weight { fan_in, gain: 1.0 }),
            b: None,
        }
    }

    fn norm(&mut self, prefix: &str) -> Norm {
        let d = self.cfg.d_model;
        Norm {
            gain: self.push(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str) -> Attention {
        let d = self.cfg.d_model;
        let rg = self.residual_gain;
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d, 1.0),
            // a key bias only shifts each query's scores, which softmax ignores
            k: self.projection(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d, 1.0),
            o: self.linear(&format!("{prefix}.o"), d, d, rg),
        }
    }

    fn ffn(&mut self, prefix: &str) -> FeedForward {
        let (d, f) = (self.cfg.d_model, self.cfg.ffn_dim);
        let rg = self.residual_gain;
        FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, f, 1.0),
            down: self.linear(&format!("{prefix}.down"), f, d, rg),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let depth = (cfg.n_layers_enc + cfg.n_layers_dec) as f64;
    let mut b = Builder {
        specs: Vec::new(),
        cfg,
        residual_gain: 1.0 / depth.sqrt(),
    };
    let embed = b.push("embed".into(), vec![cfg.d_model, cfg.vocab_size], Init::Embedding);
    let encoder = (0..cfg.n_layers_enc)
        .map(|i| EncoderLayer {
            ln_attn: b.norm(&format!("enc.{i}.ln_attn")),
            attn: b.attention(&format!("enc.{i}.attn")),
            ln_ffn: b.norm(&format!("enc.{i}.ln_ffn")),
            ffn: b.ffn(&format!("enc.{i}.ffn")),
        })
        .collect();
    let enc_norm = b.norm("enc.ln_final");
    let decoder = (0..cfg.n_layers_dec)
        .map(|i| DecoderLayer {
            ln_self: b.norm(&format!("dec.{i}.ln_self")),
            self_attn: b.attention(&format!("dec.{i}.self_attn")),
            ln_cross: b.norm(&format!("dec.{i}.ln_cross")),
            cross_attn: b.attention(&format!("dec.{i}.cross_attn")),
            ln_ffn: b.norm(&format!("dec.{i}.ln_ffn")),
            ffn: b.ffn(&format!("dec.{i}.ffn")),
        })
        .collect();
    let dec_norm = b.norm("dec.ln_final");
    (
        b.specs,
        Layout {
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        },
    )
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    build_layout(cfg).0
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel<F> {
    config: ModelConfig,
    params: Vec<Param<F>>,
    layout: Layout,
}

impl<F: Float> Seq2SeqModel<F> {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let params = specs
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<F> = match spec.init {
                    Init::Zeros => vec![F::zero(); n],
                    Init::Ones => vec![F::one(); n],
                    Init::Embedding => sample(&mut rng, n, 0.5 / d.sqrt()),
                    Init::Weight { fan_in, gain } => {
                        sample(&mut rng, n, gain / (fan_in as f64).sqrt())
                    }
                };
                Param {
                    name: spec.name,
                    tensor: Tensor::new(spec.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from parameter tensors in declared order.
    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_layout(&config);
        if specs.len() != tensors.len() {
            return Err(Error::format(
                "params",
                format!("expected {} tensors, got {}", specs.len(), tensors.len()),
            ));
        }
        let params = specs
            .into_iter()
            .zip(tensors)
            .map(|(spec, tensor)| {
                if spec.shape != tensor.shape() {
                    return Err(Error::format(
                        spec.name.clone(),
                        format!("shape {:?} does not match {:?}", tensor.shape(), spec.shape),
                    ));
                }
                Ok(Param {
                    name: spec.name,
                    tensor,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// The shared `D×V` embedding matrix.
    pub fn embedding(&self) -> &Tensor<F> {
        &self.params[self.layout.embed].tensor
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<G: Float>(&self) -> Seq2SeqModel<G> {
        Seq2SeqModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Whether two models hold bitwise-identical parameters.
    pub fn same_parameters(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a
                        .tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

fn sample<F: Float>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| F::lit(normal.sample(rng))).collect()
}
