//! Pipeline checkpoints: `SOFTPIPE-PIPELINE1\n`, a little-endian `u64`
//! header length, a JSON header, then the `sum` and `tra` model checkpoints
//! back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SumTraPipeline;
use crate::error::{Error, Result};
use crate::model::{model_from_prefix, model_to_bytes};
use crate::tasks::Vocab;

pub const PIPELINE_MAGIC: &[u8] = b"SOFTPIPE-PIPELINE1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    vocab: Vocab,
    summary_max_len: usize,
    alpha: f64,
    parts: Vec<Part>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Part {
    name: String,
    bytes: u64,
}

pub fn pipeline_to_bytes(pipeline: &SumTraPipeline<f32>) -> Vec<u8> {
    let sum = model_to_bytes(pipeline.sum());
    let tra = model_to_bytes(pipeline.tra());
    let header = Header {
        format_version: FORMAT_VERSION,
        vocab: pipeline.vocab(),
        summary_max_len: pipeline.summary_max_len(),
        alpha: pipeline.alpha(),
        parts: vec![
            Part {
                name: "sum".into(),
                bytes: sum.len() as u64,
            },
            Part {
                name: "tra".into(),
                bytes: tra.len() as u64,
            },
        ],
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PIPELINE_MAGIC.len() + 8 + header.len() + sum.len() + tra.len());
    out.extend_from_slice(PIPELINE_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&sum);
    out.extend_from_slice(&tra);
    out
}

pub fn pipeline_from_bytes(bytes: &[u8]) -> Result<SumTraPipeline<f32>> {
    let rest = bytes
        .strip_prefix(PIPELINE_MAGIC)
        .ok_or_else(|| Error::format("magic", "not a pipeline checkpoint"))?;
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format("header", "truncated header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header: Header = serde_json::from_slice(
        rest.get(8..8 + header_len)
            .ok_or_else(|| Error::format("header", "truncated header"))?,
    )
    .map_err(|e| Error::format("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", header.format_version),
        ));
    }
    let names: Vec<&str> = header.parts.iter().map(|p| p.name.as_str()).collect();
    if names != ["sum", "tra"] {
        return Err(Error::format("parts", format!("expected [sum, tra], found {names:?}")));
    }

    let mut offset = PIPELINE_MAGIC.len() + 8 + header_len;
    let mut models = Vec::with_capacity(2);
    for part in &header.parts {
        let end = offset + part.bytes as usize;
        let blob = bytes
            .get(offset..end)
            .ok_or_else(|| Error::format(part.name.clone(), "truncated sub-checkpoint"))?;
        let (model, used) = model_from_prefix(blob)?;
        if used != blob.len() {
            return Err(Error::format(part.name.clone(), "sub-checkpoint length mismatch"));
        }
        models.push(model);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format("data", "trailing bytes after the last sub-checkpoint"));
    }
    let tra = models.pop().expect("two parts");
    let sum = models.pop().expect("two parts");
    SumTraPipeline::new(sum, tra, header.vocab, header.summary_max_len)
        .and_then(|p| p.with_alpha(header.alpha))
        .map_err(|e| Error::format("header", e.to_string()))
}

pub fn save_pipeline(pipeline: &SumTraPipeline<f32>, path: &Path) -> Result<()> {
    fs::write(path, pipeline_to_bytes(pipeline)).map_err(|e| Error::io(path, e))
}

pub fn load_pipeline(path: &Path) -> Result<SumTraPipeline<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    pipeline_from_bytes(&bytes)
}
