//! Supervision for tuning proxy models: ranked classification sets, sampled
//! extraction sets, the span-start degradation transform and the on-disk
//! dataset format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{Answer, BackendError, ClassifyItem, DispatchOptions, Dispatcher, ExtractItem};
use crate::corpus::{sample_count, tokenize, Corpus, CorpusError, TokenSequence, TOKENIZER_VERSION};
use crate::primitives::{
    decode_bio, encode_bio, nte_label, render_nli_prompt, snap_to_tokens, span_token_range, BioSequence, DecodeMode,
    NteExample, PrimitiveError, Span,
};

pub const DATASET_SCHEMA: &str = "ds-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("corpus has {available} records but {needed} are needed")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("label or instruction must not be empty")]
    EmptyInstruction,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("expected a {expected} set, got {found}")]
    WrongKind { expected: SetKind, found: SetKind },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scoring record {record} failed: {reason}")]
    ScoringFailed { record: String, reason: String },
    #[error("record {record}: {source}")]
    Primitive {
        record: String,
        #[source]
        source: PrimitiveError,
    },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{path}: malformed dataset: {detail}")]
    Malformed { path: String, detail: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> GeneratorError {
    GeneratorError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Classification,
    Extraction,
}

impl SetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::Classification => "classification",
            SetKind::Extraction => "extraction",
        }
    }

    pub fn data_file(self) -> &'static str {
        match self {
            SetKind::Classification => "classification.jsonl",
            SetKind::Extraction => "extraction.jsonl",
        }
    }
}

impl std::fmt::Display for SetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub record_id: String,
    pub text: String,
    pub answer: Answer,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionExample {
    pub record_id: String,
    pub text: String,
    pub spans: Vec<Span>,
    pub bio: BioSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Examples {
    Classification(Vec<ClassificationExample>),
    Extraction(Vec<ExtractionExample>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Id of the backend that scored or annotated the examples.
    pub annotator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
    pub tokenizer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub label_or_instruction: String,
    pub examples: Examples,
    pub provenance: Provenance,
}

impl TrainingSet {
    pub fn kind(&self) -> SetKind {
        match self.examples {
            Examples::Classification(_) => SetKind::Classification,
            Examples::Extraction(_) => SetKind::Extraction,
        }
    }

    pub fn len(&self) -> usize {
        match &self.examples {
            Examples::Classification(e) => e.len(),
            Examples::Extraction(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores every record for `label`, then keeps the top `n` as positives and
/// the bottom `n` as negatives. Ties keep corpus order. Output lists the
/// positives, then the negatives, each in corpus order.
pub fn generate_classification_set(
    corpus: &Corpus,
    label: &str,
    n: usize,
    scorer: &Dispatcher,
    opts: &DispatchOptions,
) -> Result<TrainingSet, GeneratorError> {
    if label.trim().is_empty() {
        return Err(GeneratorError::EmptyInstruction);
    }
    if 2 * n > corpus.len() {
        return Err(GeneratorError::CorpusTooSmall {
            needed: 2 * n,
            available: corpus.len(),
        });
    }
    let items: Vec<ClassifyItem> = corpus
        .records()
        .iter()
        .map(|r| ClassifyItem {
            text: r.text.clone(),
            label: label.to_string(),
        })
        .collect();
    let scores: Vec<f64> = scorer
        .classify(&items, opts)?
        .into_iter()
        .zip(corpus.records())
        .map(|(r, rec)| {
            r.map(|c| c.score).map_err(|reason| GeneratorError::ScoringFailed {
                record: rec.id.clone(),
                reason,
            })
        })
        .collect::<Result<_, _>>()?;
    if scores.windows(2).all(|w| w[0] == w[1]) && scores.len() > 1 {
        log::warn!(
            "all {} records scored {} for {label:?}; ranking falls back to corpus order",
            scores.len(),
            scores[0]
        );
    }

    let positions = select_top_bottom(&scores, n);
    let example = |pos: usize, answer| {
        let r = &corpus.records()[pos];
        ClassificationExample {
            record_id: r.id.clone(),
            text: r.text.clone(),
            answer,
            score: scores[pos],
        }
    };
    let mut examples: Vec<ClassificationExample> = positions.0.into_iter().map(|p| example(p, Answer::Yes)).collect();
    examples.extend(positions.1.into_iter().map(|p| example(p, Answer::No)));
    Ok(TrainingSet {
        label_or_instruction: label.to_string(),
        examples: Examples::Classification(examples),
        provenance: Provenance {
            annotator: scorer.descriptor().id.clone(),
            tokenizer: TOKENIZER_VERSION.to_string(),
            ..Provenance::default()
        },
    })
}

/// Positions of the top `n` and bottom `n` scores under a stable descending
/// sort, each returned in ascending position order.
pub fn select_top_bottom(scores: &[f64], n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ranked: Vec<usize> = (0..scores.len()).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut top = ranked[..n].to_vec();
    let mut bottom = ranked[ranked.len() - n..].to_vec();
    top.sort_unstable();
    bottom.sort_unstable();
    (top, bottom)
}

/// Annotates `n` uniformly sampled records. Character spans are widened to
/// token boundaries; spans that touch no token are discarded, and records
/// whose reply could not be used are kept with no spans.
pub fn generate_extraction_set(
    corpus: &Corpus,
    instruction: &str,
    n: usize,
    seed: u64,
    annotator: &Dispatcher,
    opts: &DispatchOptions,
) -> Result<TrainingSet, GeneratorError> {
    if instruction.trim().is_empty() {
        return Err(GeneratorError::EmptyInstruction);
    }
    let sample = sample_count(corpus, n, seed)?;
    let items: Vec<ExtractItem> = sample
        .records()
        .iter()
        .map(|r| ExtractItem {
            text: r.text.clone(),
            instruction: instruction.to_string(),
        })
        .collect();
    let outcomes = if items.is_empty() {
        Vec::new()
    } else {
        annotator.extract(&items, opts)?
    };
    let mut examples = Vec::with_capacity(items.len());
    for (record, outcome) in sample.records().iter().zip(outcomes) {
        let spans = outcome.unwrap_or_else(|reason| {
            log::warn!(
                "annotation of {} unusable, keeping it as a negative: {reason}",
                record.id
            );
            Vec::new()
        });
        let tokens = tokenize(&record.text);
        let snapped = snap_all(&record.text, &spans, &tokens);
        let bio = encode_bio(&snapped, &tokens).map_err(|source| GeneratorError::Primitive {
            record: record.id.clone(),
            source,
        })?;
        examples.push(ExtractionExample {
            record_id: record.id.clone(),
            text: record.text.clone(),
            spans: snapped,
            bio,
        });
    }
    Ok(TrainingSet {
        label_or_instruction: instruction.to_string(),
        examples: Examples::Extraction(examples),
        provenance: Provenance {
            annotator: annotator.descriptor().id.clone(),
            tokenizer: TOKENIZER_VERSION.to_string(),
            seed: Some(seed),
            ..Provenance::default()
        },
    })
}

/// Snaps each span outward to token boundaries and merges spans that come
/// to overlap.
fn snap_all(text: &str, spans: &[Span], tokens: &TokenSequence) -> Vec<Span> {
    let mut snapped: Vec<Span> = spans
        .iter()
        .filter_map(|s| snap_to_tokens(text, s.start, s.end, tokens))
        .collect();
    snapped.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<Span> = Vec::with_capacity(snapped.len());
    for s in snapped {
        match merged.last_mut() {
            Some(prev) if s.start < prev.end => {
                if s.end > prev.end {
                    *prev = Span::from_text(text, prev.start, s.end).expect("union of valid spans");
                }
            }
            _ => merged.push(s),
        }
    }
    merged
}

/// Draws a new start token for every span uniformly from `0..=end`, keeping
/// each end token. A start that would reach into the previous span is
/// clamped to the token after it, so ends and span counts never change.
pub fn degrade_spans(set: &TrainingSet, seed: u64) -> Result<TrainingSet, GeneratorError> {
    let Examples::Extraction(examples) = &set.examples else {
        return Err(GeneratorError::WrongKind {
            expected: SetKind::Extraction,
            found: set.kind(),
        });
    };
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let tokens = tokenize(&ex.text);
        let mut spans = Vec::with_capacity(ex.spans.len());
        let mut floor = 0usize;
        for (ordinal, span) in ex.spans.iter().enumerate() {
            let (_, end) = span_token_range(span, &tokens).ok_or_else(|| GeneratorError::Primitive {
                record: ex.record_id.clone(),
                source: PrimitiveError::UnalignedSpan(span.clone()),
            })?;
            let start = degraded_start(seed, &ex.record_id, ordinal, end).max(floor);
            floor = end + 1;
            spans.push(
                Span::from_text(&ex.text, tokens.tokens[start].start, tokens.tokens[end].end)
                    .expect("token offsets are valid"),
            );
        }
        let bio = encode_bio(&spans, &tokens).map_err(|source| GeneratorError::Primitive {
            record: ex.record_id.clone(),
            source,
        })?;
        out.push(ExtractionExample {
            record_id: ex.record_id.clone(),
            text: ex.text.clone(),
            spans,
            bio,
        });
    }
    let mut provenance = set.provenance.clone();
    provenance.notes.push(format!("degraded, seed={seed}"));
    Ok(TrainingSet {
        label_or_instruction: set.label_or_instruction.clone(),
        examples: Examples::Extraction(out),
        provenance,
    })
}

/// One repeated-span example per record, split at a uniformly drawn token
/// index in `1..len`. Records with fewer than two tokens are skipped.
pub fn generate_nte_examples(
    corpus: &Corpus,
    seed: u64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<(String, usize, NteExample)>, GeneratorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for record in corpus.records() {
        let len = tokenize(&record.text).len();
        if len < 2 {
            continue;
        }
        let split = rng.random_range(1..len);
        let example = nte_label(&record.text, split, min_len, max_len).map_err(|source| GeneratorError::Primitive {
            record: record.id.clone(),
            source,
        })?;
        out.push((record.id.clone(), split, example));
    }
    Ok(out)
}

/// Derives an independent seed for one purpose (e.g. `"sample"`, `"degrade"`)
/// from a single user-facing seed: the first 8 bytes of
/// sha256(seed as LE bytes ++ purpose), read little-endian.
pub fn sub_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform draw from `0..=end` keyed by (seed, record, span ordinal).
pub fn degraded_start(seed: u64, record_id: &str, ordinal: usize, end: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((record_id.len() as u64).to_le_bytes());
    h.update(record_id.as_bytes());
    h.update((ordinal as u64).to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest).random_range(0..=end)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub kind: SetKind,
    pub label_or_instruction: String,
    pub file: String,
    pub counts: Value,
    pub tokenizer: String,
    pub provenance: Provenance,
    /// Hex SHA-256 of the data file bytes.
    pub digest: String,
}

fn example_lines(set: &TrainingSet) -> Result<String, GeneratorError> {
    let mut out = String::new();
    match &set.examples {
        Examples::Classification(examples) => {
            for ex in examples {
                let prompt = render_nli_prompt(&ex.text, &set.label_or_instruction).map_err(|source| {
                    GeneratorError::Primitive {
                        record: ex.record_id.clone(),
                        source,
                    }
                })?;
                let line = json!({
                    "id": ex.record_id,
                    "text": ex.text,
                    "label": set.label_or_instruction,
                    "answer": ex.answer,
                    "score": ex.score,
                    "prompt": prompt.rendered,
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        Examples::Extraction(examples) => {
            for ex in examples {
                let tokens = tokenize(&ex.text);
                let line = json!({
                    "id": ex.record_id,
                    "text": ex.text,
                    "instruction": set.label_or_instruction,
                    "spans": ex.spans,
                    "bio": ex.bio,
                    "tokens": tokens.surfaces(),
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn counts(set: &TrainingSet) -> Value {
    match &set.examples {
        Examples::Classification(e) => {
            let yes = e.iter().filter(|x| x.answer == Answer::Yes).count();
            json!({"examples": e.len(), "yes": yes, "no": e.len() - yes})
        }
        Examples::Extraction(e) => {
            let spans: usize = e.iter().map(|x| x.spans.len()).sum();
            let empty = e.iter().filter(|x| x.spans.is_empty()).count();
            json!({"examples": e.len(), "spans": spans, "without_spans": empty})
        }
    }
}

/// Writes the data file and `manifest.json` into `dir`. Re-emitting the same
/// set produces identical bytes.
pub fn emit_dataset(set: &TrainingSet, dir: &Path) -> Result<Manifest, GeneratorError> {
    let data = example_lines(set)?;
    let kind = set.kind();
    let manifest = Manifest {
        schema: DATASET_SCHEMA.to_string(),
        kind,
        label_or_instruction: set.label_or_instruction.clone(),
        file: kind.data_file().to_string(),
        counts: counts(set),
        tokenizer: TOKENIZER_VERSION.to_string(),
        provenance: set.provenance.clone(),
        digest: hex::encode(Sha256::digest(data.as_bytes())),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let data_path = dir.join(kind.data_file());
    fs::write(&data_path, data).map_err(|e| io_err(&data_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    let text = serde_json::to_string_pretty(&value).expect("value serializes") + "\n";
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`emit_dataset`], checking the
/// digest and that every extraction example's tags decode to its spans.
pub fn load_dataset(dir: &Path) -> Result<(TrainingSet, Manifest), GeneratorError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let malformed = |path: &PathBuf, detail: String| GeneratorError::Malformed {
        path: path.display().to_string(),
        detail,
    };
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| malformed(&manifest_path, e.to_string()))?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(malformed(
            &manifest_path,
            format!("unsupported schema {:?}", manifest.schema),
        ));
    }
    let data_path = dir.join(manifest.kind.data_file());
    let data = fs::read_to_string(&data_path).map_err(|e| io_err(&data_path, e))?;
    let digest = hex::encode(Sha256::digest(data.as_bytes()));
    if digest != manifest.digest {
        return Err(malformed(
            &data_path,
            "content digest does not match the manifest".into(),
        ));
    }
    let mut classification = Vec::new();
    let mut extraction = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let v: Value = serde_json::from_str(line).map_err(|e| malformed(&data_path, format!("line {}: {e}", i + 1)))?;
        let field = |k: &str| {
            v.get(k)
                .cloned()
                .ok_or_else(|| malformed(&data_path, format!("line {}: missing {k}", i + 1)))
        };
        let get_str = |k: &str| -> Result<String, GeneratorError> {
            serde_json::from_value(field(k)?).map_err(|e| malformed(&data_path, format!("line {}: {k}: {e}", i + 1)))
        };
        let (id, text) = (get_str("id")?, get_str("text")?);
        match manifest.kind {
            SetKind::Classification => {
                let answer = serde_json::from_value(field("answer")?)
                    .map_err(|e| malformed(&data_path, format!("line {}: answer: {e}", i + 1)))?;
                let score = field("score")?
                    .as_f64()
                    .ok_or_else(|| malformed(&data_path, format!("line {}: score is not a number", i + 1)))?;
                classification.push(ClassificationExample {
                    record_id: id,
                    text,
                    answer,
                    score,
                });
            }
            SetKind::Extraction => {
                let spans: Vec<Span> = serde_json::from_value(field("spans")?)
                    .map_err(|e| malformed(&data_path, format!("line {}: spans: {e}", i + 1)))?;
                let bio: BioSequence = serde_json::from_value(field("bio")?)
                    .map_err(|e| malformed(&data_path, format!("line {}: bio: {e}", i + 1)))?;
                let decoded = decode_bio(&bio, &tokenize(&text), &text, DecodeMode::Strict)
                    .map_err(|e| malformed(&data_path, format!("line {}: {e}", i + 1)))?;
                if decoded != spans {
                    return Err(malformed(
                        &data_path,
                        format!("line {}: bio does not decode to spans", i + 1),
                    ));
                }
                extraction.push(ExtractionExample {
                    record_id: id,
                    text,
                    spans,
                    bio,
                });
            }
        }
    }
    let examples = match manifest.kind {
        SetKind::Classification => Examples::Classification(classification),
        SetKind::Extraction => Examples::Extraction(extraction),
    };
    Ok((
        TrainingSet {
            label_or_instruction: manifest.label_or_instruction.clone(),
            examples,
            provenance: manifest.provenance.clone(),
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_bottom_selection() {
        assert_eq!(
            select_top_bottom(&[0.9, 0.1, 0.8, 0.2, 0.5], 2),
            (vec![0, 2], vec![1, 3])
        );
        assert_eq!(select_top_bottom(&[0.5; 4], 1), (vec![0], vec![3]));
    }

    #[test]
    fn nte_examples_use_one_seeded_split_per_record() {
        let corpus = Corpus::from_texts(
            &["Barack Obama visited Paris . Obama praised Paris .", "solo", "a b a b"],
            "t",
        )
        .unwrap();
        let a = generate_nte_examples(&corpus, 4, 1, 8).unwrap();
        assert_eq!(a, generate_nte_examples(&corpus, 4, 1, 8).unwrap());
        let ids: Vec<&str> = a.iter().map(|(id, _, _)| id.as_str()).collect();
        assert_eq!(ids, ["rec-000000", "rec-000002"]);
        for (id, split, ex) in &a {
            let len = tokenize(&corpus.get(id).unwrap().text).len();
            assert!((1..len).contains(split));
            assert_eq!(ex.tags.tags.len(), len - split);
        }
        assert!(matches!(
            generate_nte_examples(&corpus, 4, 3, 2),
            Err(GeneratorError::Primitive { .. })
        ));
    }

    #[test]
    fn sub_seeds_differ_by_purpose() {
        assert_eq!(sub_seed(0, "sample"), sub_seed(0, "sample"));
        assert_ne!(sub_seed(0, "sample"), sub_seed(0, "degrade"));
        assert_ne!(sub_seed(0, "sample"), sub_seed(1, "sample"));
    }

    #[test]
    fn degraded_start_is_in_range_and_stable() {
        for end in 0..20 {
            let s = degraded_start(7, "r", 0, end);
            assert!(s <= end);
            assert_eq!(s, degraded_start(7, "r", 0, end));
        }
        let draws: std::collections::BTreeSet<usize> = (0..200).map(|k| degraded_start(1, "r", k, 4)).collect();
        assert_eq!(draws, (0..=4).collect());
    }

    #[test]
    fn snapping_merges_overlaps() {
        let text = "alpha beta gamma";
        let tokens = tokenize(text);
        let spans = vec![
            Span::from_text(text, 2, 7).unwrap(),
            Span::from_text(text, 8, 9).unwrap(),
            Span::from_text(text, 12, 13).unwrap(),
        ];
        let snapped = snap_all(text, &spans, &tokens);
        assert_eq!(
            snapped,
            vec![
                Span::from_text(text, 0, 10).unwrap(),
                Span::from_text(text, 11, 16).unwrap()
            ]
        );
    }
}
