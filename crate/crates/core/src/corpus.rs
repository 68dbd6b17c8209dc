//! Corpus ingestion, tokenization and seeded sampling.
//!
//! Offsets throughout the crate are Unicode scalar indices into the record
//! text, never byte offsets. The tokenizer rule is frozen as [`TOKENIZER_VERSION`]
//! because span alignment, BIO tags and word-level F1 all depend on it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

/// Version tag recorded in every emitted dataset and report.
pub const TOKENIZER_VERSION: &str = "tok-v1";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("malformed corpus line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("empty record id at position {0}")]
    EmptyId(usize),
    #[error("corpus has no records")]
    EmptyCorpus,
    #[error("sampling fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("cannot sample {requested} records from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("io error reading {path}: {detail}")]
    Io { path: String, detail: String },
}

/// One text unit flowing through a pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl CorpusRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: None,
        }
    }
}

/// Ordered, id-unique collection of records. Record order is file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<CorpusRecord>,
    source: String,
}

impl Corpus {
    /// Builds a corpus, checking that ids are non-empty and unique.
    pub fn new(records: Vec<CorpusRecord>, source: impl Into<String>) -> Result<Self, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            if rec.id.is_empty() {
                return Err(CorpusError::EmptyId(pos));
            }
            if !seen.insert(rec.id.as_str()) {
                return Err(CorpusError::DuplicateId(rec.id.clone()));
            }
        }
        Ok(Self {
            records,
            source: source.into(),
        })
    }

    /// Convenience constructor assigning `rec-NNNNNN` ids by position.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], source: impl Into<String>) -> Result<Self, CorpusError> {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| CorpusRecord::new(auto_id(i), t.as_ref()))
            .collect();
        Self::new(records, source)
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Map from record id to its position in corpus order.
    pub fn positions(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Keeps the records at the given positions, which must be ascending.
    fn select(&self, positions: &[usize], source: String) -> Corpus {
        Corpus {
            records: positions.iter().map(|&i| self.records[i].clone()).collect(),
            source,
        }
    }
}

fn auto_id(line: usize) -> String {
    format!("rec-{line:06}")
}

#[derive(Deserialize)]
struct RawLine {
    id: Option<String>,
    text: String,
    #[serde(default)]
    meta: Option<BTreeMap<String, String>>,
}

/// Loads a JSONL corpus. Blank lines are skipped; auto-assigned ids use the
/// zero-based line index, error line numbers are one-based.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_corpus_jsonl(&raw, &path.display().to_string())
}

pub fn parse_corpus_jsonl(raw: &str, source: &str) -> Result<Corpus, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RawLine =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine(idx + 1, e.to_string()))?;
        records.push(CorpusRecord {
            id: parsed.id.unwrap_or_else(|| auto_id(idx)),
            text: parsed.text,
            meta: parsed.meta,
        });
    }
    Corpus::new(records, source)
}

/// Serializes a corpus back to JSONL (one record per line, LF endings).
pub fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for rec in corpus.records() {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// One token; `start`/`end` are scalar offsets, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    /// Index of the token starting exactly at `offset`.
    pub fn token_starting_at(&self, offset: usize) -> Option<usize> {
        self.tokens.binary_search_by_key(&offset, |t| t.start).ok()
    }

    /// Index of the token ending exactly at `offset`.
    pub fn token_ending_at(&self, offset: usize) -> Option<usize> {
        self.tokens.binary_search_by_key(&offset, |t| t.end).ok()
    }
}

pub fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// True when every character of `surface` is Unicode punctuation.
pub fn is_punctuation_token(surface: &str) -> bool {
    !surface.is_empty() && surface.chars().all(is_punctuation)
}

/// tok-v1: split on whitespace runs, then peel leading and trailing
/// punctuation runs off each chunk as separate tokens.
pub fn tokenize(text: &str) -> TokenSequence {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut tokens);
    }
    TokenSequence { tokens }
}

fn split_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let mut lead = start;
    while lead < end && is_punctuation(chars[lead]) {
        lead += 1;
    }
    if lead == end {
        // chunk is all punctuation
        push_token(chars, start, end, out);
        return;
    }
    let mut trail = end;
    while trail > lead && is_punctuation(chars[trail - 1]) {
        trail -= 1;
    }
    if lead > start {
        push_token(chars, start, lead, out);
    }
    push_token(chars, lead, trail, out);
    if trail < end {
        push_token(chars, trail, end, out);
    }
}

fn push_token(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    out.push(Token {
        surface: chars[start..end].iter().collect(),
        start,
        end,
    });
}

/// Byte offset of every scalar boundary (length `chars + 1`).
pub fn scalar_byte_offsets(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    offsets.push(text.len());
    offsets
}

/// Slices `text` by scalar offsets; `None` if out of range or inverted.
pub fn slice_scalars(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut iter = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b_start = iter.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        iter.nth(end - start - 1)?
    };
    Some(&text[b_start..b_end])
}

pub fn scalar_len(text: &str) -> usize {
    text.chars().count()
}

/// Seeded, order-preserving sample of `count` positions out of `len`.
pub(crate) fn sample_positions(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Uniform sampling without replacement of `ceil(fraction * len)` records.
pub fn sample_fraction(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let count = ((fraction * corpus.len() as f64).ceil() as usize).clamp(1, corpus.len());
    let positions = sample_positions(corpus.len(), count, seed);
    Ok(corpus.select(
        &positions,
        format!("{}#sample(fraction={fraction},seed={seed})", corpus.source()),
    ))
}

/// Uniform sampling without replacement of exactly `n` records.
pub fn sample_count(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if n > corpus.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: corpus.len(),
        });
    }
    let positions = sample_positions(corpus.len(), n, seed);
    Ok(corpus.select(&positions, format!("{}#sample(n={n},seed={seed})", corpus.source())))
}
