//! Checkpoint files: `SOFTPIPE1\n`, a little-endian `u64` header length, a
//! JSON header (format version, config, parameter names and shapes), then
//! every parameter as little-endian `f32` in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_layout, ModelConfig, Seq2SeqModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"SOFTPIPE1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn model_to_bytes(model: &Seq2SeqModel<f32>) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + 4 * model.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint, returning the model and the number of bytes consumed.
pub(crate) fn model_from_prefix(bytes: &[u8]) -> Result<(Seq2SeqModel<f32>, usize)> {
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| Error::format("magic", "not a SOFTPIPE1 checkpoint"))?;
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format("header", "truncated header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = rest
        .get(8..8 + header_len)
        .ok_or_else(|| Error::format("header", "truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", header.format_version),
        ));
    }
    if header.dtype != "f32" {
        return Err(Error::format("dtype", format!("unsupported dtype {}", header.dtype)));
    }
    let cfg = header.config;
    cfg.validate()
        .map_err(|e| Error::format("config", e.to_string()))?;

    let (specs, _) = build_layout(&cfg);
    if specs.len() != header.params.len() {
        return Err(Error::format(
            "params",
            format!("config implies {} tensors, header lists {}", specs.len(), header.params.len()),
        ));
    }
    for (spec, entry) in specs.iter().zip(&header.params) {
        if spec.name != entry.name {
            return Err(Error::format("params", format!("expected `{}`, found `{}`", spec.name, entry.name)));
        }
        if spec.shape != entry.shape {
            let field = match (spec.name.as_str(), &entry.shape[..]) {
                ("embed", &[d, v]) if d == cfg.d_model && v != cfg.vocab_size => "vocab_size".to_string(),
                ("embed", _) => "d_model".to_string(),
                (name, _) => format!("params.{name}"),
            };
            return Err(Error::format(
                field,
                format!(
                    "stored shape {:?} of `{}` disagrees with config ({:?})",
                    entry.shape, entry.name, spec.shape
                ),
            ));
        }
    }

    let mut offset = CHECKPOINT_MAGIC.len() + 8 + header_len;
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        let n: usize = spec.shape.iter().product();
        let blob = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::format("data", format!("truncated blob for `{}`", spec.name)))?;
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(spec.shape.clone(), data)?);
        offset += 4 * n;
    }
    Ok((Seq2SeqModel::from_parts(cfg, tensors)?, offset))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Seq2SeqModel<f32>> {
    let (model, used) = model_from_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            "data",
            format!("{} trailing bytes after the last parameter", bytes.len() - used),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Seq2SeqModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
