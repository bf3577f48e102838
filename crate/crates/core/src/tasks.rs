//! Synthetic cross-lingual summarization tasks with exact oracles.
//!
//! A document is a run of `(marker, content)` pairs. Summarizing keeps the
//! content tokens marked `KEEP`; translating maps every source content token
//! `t` to `t + C` and optionally reverses the sequence. Both steps are exact,
//! so the composition gives a ground-truth cross-lingual reference.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const SEP: Token = 3;
pub const LANG_SRC: Token = 4;
pub const LANG_TGT: Token = 5;
pub const KEEP: Token = 6;
pub const DROP: Token = 7;
const FIRST_CONTENT: Token = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Src,
    Tgt,
}

impl Lang {
    pub fn tag(self) -> Token {
        match self {
            Lang::Src => LANG_SRC,
            Lang::Tgt => LANG_TGT,
        }
    }
}

/// Token layout shared by every model in a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    content_size: u32,
}

impl Vocab {
    pub fn new(content_size: u32) -> Self {
        assert!(content_size >= 1, "content alphabet must be non-empty");
        Self { content_size }
    }

    pub fn content_size(&self) -> u32 {
        self.content_size
    }

    pub fn size(&self) -> usize {
        (FIRST_CONTENT + 2 * self.content_size) as usize
    }

    pub fn src_range(&self) -> Range<Token> {
        FIRST_CONTENT..FIRST_CONTENT + self.content_size
    }

    pub fn tgt_range(&self) -> Range<Token> {
        FIRST_CONTENT + self.content_size..FIRST_CONTENT + 2 * self.content_size
    }

    pub fn range(&self, lang: Lang) -> Range<Token> {
        match lang {
            Lang::Src => self.src_range(),
            Lang::Tgt => self.tgt_range(),
        }
    }

    pub fn is_content(&self, t: Token) -> bool {
        (FIRST_CONTENT..FIRST_CONTENT + 2 * self.content_size).contains(&t)
    }

    /// Specials, language tags and markers.
    pub fn is_special(t: Token) -> bool {
        t < FIRST_CONTENT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reorder {
    None,
    Reverse,
}

/// Summary ordering. `B` lists kept tokens in reverse document order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Style::A => "A",
            Style::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTaskSpec {
    /// Content alphabet size `C`; the vocabulary has `8 + 2C` entries.
    pub content_size: u32,
    pub n_pairs: usize,
    pub keep_probability: f64,
    pub reorder: Reorder,
    pub style: Style,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            content_size: 32,
            n_pairs: 8,
            keep_probability: 0.4,
            reorder: Reorder::Reverse,
            style: Style::A,
            seed: 0,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=30).contains(&self.n_pairs) {
            return Err(Error::contract(format!(
                "n_pairs must lie in 2..=30, got {}",
                self.n_pairs
            )));
        }
        if !(self.keep_probability > 0.0 && self.keep_probability < 1.0) {
            return Err(Error::contract(format!(
                "keep_probability must lie in (0, 1), got {}",
                self.keep_probability
            )));
        }
        if self.content_size < 1 {
            return Err(Error::contract("content_size must be at least 1"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.content_size)
    }

    pub fn translation_offset(&self) -> u32 {
        self.content_size
    }

    pub fn document_len(&self) -> usize {
        2 + 2 * self.n_pairs
    }

    /// Longest possible oracle summary, tags included.
    pub fn max_summary_len(&self) -> usize {
        self.n_pairs + 2
    }

    pub fn with_style(&self, style: Style) -> Self {
        Self {
            style,
            ..self.clone()
        }
    }
}

/// Draws one document. Returns whether the marker draw had to be repeated
/// because every marker came out `DROP`.
pub fn gen_document_traced<R: Rng>(spec: &ToyTaskSpec, rng: &mut R) -> (Vec<Token>, bool) {
    let src = spec.vocab().src_range();
    let mut redrawn = false;
    let markers = loop {
        let markers: Vec<Token> = (0..spec.n_pairs)
            .map(|_| {
                if rng.random_bool(spec.keep_probability) {
                    KEEP
                } else {
                    DROP
                }
            })
            .collect();
        if markers.contains(&KEEP) {
            break markers;
        }
        redrawn = true;
    };
    let mut doc = Vec::with_capacity(spec.document_len());
    doc.push(BOS);
    for marker in markers {
        doc.push(marker);
        doc.push(rng.random_range(src.clone()));
    }
    doc.push(EOS);
    (doc, redrawn)
}

pub fn gen_document<R: Rng>(spec: &ToyTaskSpec, rng: &mut R) -> Vec<Token> {
    gen_document_traced(spec, rng).0
}

/// `LANG_SRC`, the kept content tokens (document order for style A,
/// reversed for B), `EOS`.
pub fn summarize_oracle(spec: &ToyTaskSpec, doc: &[Token]) -> Result<Vec<Token>> {
    let body = match doc {
        [BOS, body @ .., EOS] if body.len() % 2 == 0 => body,
        _ => {
            return Err(Error::format(
                "doc",
                "expected BOS, (marker, content) pairs, EOS",
            ))
        }
    };
    let src = spec.vocab().src_range();
    let mut kept = Vec::new();
    for (i, pair) in body.chunks_exact(2).enumerate() {
        if !src.contains(&pair[1]) {
            return Err(Error::format("doc", format!("pair {i} has non-content token {}", pair[1])));
        }
        match pair[0] {
            KEEP => kept.push(pair[1]),
            DROP => {}
            other => {
                return Err(Error::format("doc", format!("pair {i} has marker {other}")));
            }
        }
    }
    if spec.style == Style::B {
        kept.reverse();
    }
    let mut out = Vec::with_capacity(kept.len() + 2);
    out.push(LANG_SRC);
    out.extend(kept);
    out.push(EOS);
    Ok(out)
}

fn strip_tags(seq: &[Token], tag: Token, field: &str) -> Result<Vec<Token>> {
    match seq {
        [first, body @ .., EOS] if *first == tag => Ok(body.to_vec()),
        _ => Err(Error::format(field, format!("expected tag {tag} ... EOS, got {seq:?}"))),
    }
}

/// `LANG_TGT`, content mapped `t -> t + C` (reversed under `Reorder::Reverse`),
/// `EOS`.
pub fn translate_oracle(spec: &ToyTaskSpec, summary_src: &[Token]) -> Result<Vec<Token>> {
    let body = strip_tags(summary_src, LANG_SRC, "summary_src")?;
    let src = spec.vocab().src_range();
    let mut mapped = Vec::with_capacity(body.len());
    for t in body {
        if !src.contains(&t) {
            return Err(Error::Range {
                token: t,
                start: src.start,
                end: src.end,
            });
        }
        mapped.push(t + spec.translation_offset());
    }
    if spec.reorder == Reorder::Reverse {
        mapped.reverse();
    }
    let mut out = Vec::with_capacity(mapped.len() + 2);
    out.push(LANG_TGT);
    out.extend(mapped);
    out.push(EOS);
    Ok(out)
}

/// Exact inverse of [`translate_oracle`].
pub fn inverse_translate_oracle(spec: &ToyTaskSpec, summary_tgt: &[Token]) -> Result<Vec<Token>> {
    let body = strip_tags(summary_tgt, LANG_TGT, "summary_tgt")?;
    let tgt = spec.vocab().tgt_range();
    let mut mapped = Vec::with_capacity(body.len());
    for t in body {
        if !tgt.contains(&t) {
            return Err(Error::Range {
                token: t,
                start: tgt.start,
                end: tgt.end,
            });
        }
        mapped.push(t - spec.translation_offset());
    }
    if spec.reorder == Reorder::Reverse {
        mapped.reverse();
    }
    let mut out = Vec::with_capacity(mapped.len() + 2);
    out.push(LANG_SRC);
    out.extend(mapped);
    out.push(EOS);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XlsRecord {
    pub doc: Vec<Token>,
    pub summary_src: Vec<Token>,
    pub summary_tgt: Vec<Token>,
    pub backtranslation: Option<Vec<Token>>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<XlsRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&XlsRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<XlsRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }

    /// The first `k` records of the train split after a seeded shuffle.
    pub fn shots(&self, k: usize, seed: u64) -> Vec<XlsRecord> {
        let mut train = self.split_owned(Split::Train);
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        train.truncate(k);
        train
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: XlsRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("line {}", i + 1), e.to_string()))?;
            records.push(record);
        }
        Ok(Self { records })
    }
}

/// Builds disjoint train/val/test splits from one seeded stream. A document
/// already drawn is discarded and redrawn, so no document appears twice.
pub fn gen_dataset(spec: &ToyTaskSpec, n_train: usize, n_val: usize, n_test: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(n_train + n_val + n_test);
    let plan = [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)];
    for (split, n) in plan {
        let mut made = 0;
        let mut attempts = 0usize;
        while made < n {
            attempts += 1;
            if attempts > 100 * (n + 10) {
                return Err(Error::contract(
                    "document space too small for the requested dataset size",
                ));
            }
            let doc = gen_document(spec, &mut rng);
            if !seen.insert(doc.clone()) {
                continue;
            }
            let summary_src = summarize_oracle(spec, &doc)?;
            let summary_tgt = translate_oracle(spec, &summary_src)?;
            records.push(XlsRecord {
                doc,
                summary_src,
                summary_tgt,
                backtranslation: None,
                split,
            });
            made += 1;
        }
    }
    Ok(Dataset { records })
}
