//! Inference backends behind uniform classify/extract contracts.
//!
//! A [`Backend`] answers one wire request per call. The [`Dispatcher`] wraps a
//! backend with everything the executor relies on: chunking into
//! `max_batch`-sized requests, a bounded worker pool, the content-addressed
//! cache, span validation and usage counters.

mod cache;
mod chat;
mod http;
mod mock;
mod proxy;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{scalar_len, slice_scalars};
use crate::primitives::Span;

pub use cache::{DirCache, MemoryCache, ResultCache};
pub use chat::{extract_json_object, AnnotatorBackend, ChatClient, ChatMessage, OpenAiChat};
pub use http::{HttpTransport, RetryPolicy};
pub use mock::{MockBackend, MockRules, Pattern};
pub use proxy::ProxyBackend;

/// Score threshold at or above which a classification answers "yes".
pub const YES_THRESHOLD: f64 = 0.5;

pub const DEFAULT_IN_FLIGHT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassifyItem {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub score: f64,
    pub answer: Answer,
}

impl ClassifyResult {
    /// `None` unless `score` lies in `[0, 1]`.
    pub fn from_score(score: f64) -> Option<Self> {
        (0.0..=1.0).contains(&score).then_some(Self {
            score,
            answer: if score >= YES_THRESHOLD {
                Answer::Yes
            } else {
                Answer::No
            },
        })
    }

    pub fn is_yes(&self) -> bool {
        self.answer == Answer::Yes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractItem {
    pub text: String,
    pub instruction: String,
}

/// A span as reported by a backend, before validation against the text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSpan {
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
}

impl From<&Span> for RawSpan {
    fn from(s: &Span) -> Self {
        RawSpan {
            start: s.start,
            end: s.end,
            surface: Some(s.surface.clone()),
        }
    }
}

/// Per-item outcome inside a successful wire request; `Err` carries a reason.
pub type ItemOutcome<T> = Result<T, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    HttpProxy,
    LlmAnnotator,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub per_call: f64,
    pub per_1k_chars: f64,
}

/// Deterministic latency used instead of measured wall time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyModel {
    pub per_call_ms: f64,
    pub per_item_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub cost_model: CostModel,
    pub max_batch: usize,
    /// When set, wall time is simulated from this model rather than measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_latency: Option<LatencyModel>,
    /// Free-form facts about the model behind the endpoint (size, FLOPs).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, Value>,
}

impl BackendDescriptor {
    pub fn new(id: impl Into<String>, kind: BackendKind, max_batch: usize) -> Self {
        Self {
            id: id.into(),
            kind,
            cost_model: CostModel::default(),
            max_batch,
            simulated_latency: None,
            metadata: serde_json::Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.id.is_empty() {
            return Err(BackendError::InvalidDescriptor("empty id".into()));
        }
        if self.max_batch == 0 {
            return Err(BackendError::InvalidDescriptor("max_batch must be >= 1".into()));
        }
        let c = self.cost_model;
        if !(c.per_call >= 0.0 && c.per_1k_chars >= 0.0) {
            return Err(BackendError::InvalidDescriptor("costs must be non-negative".into()));
        }
        if let Some(l) = self.simulated_latency {
            if !(l.per_call_ms >= 0.0 && l.per_item_ms >= 0.0) {
                return Err(BackendError::InvalidDescriptor("latencies must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// One inference provider. Each method call is exactly one wire request.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn classify_batch(&self, items: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError>;

    fn extract_batch(&self, items: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Label,
    Span,
}

impl Primitive {
    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::Label => "label",
            Primitive::Span => "span",
        }
    }
}

/// Hex SHA-256 over the length-prefixed concatenation of the four fields.
pub fn cache_key(backend_id: &str, primitive: Primitive, instruction: &str, text: &str) -> String {
    let mut h = Sha256::new();
    for field in [backend_id, primitive.as_str(), instruction, text] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Cumulative counters for one dispatcher.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub wire_calls: usize,
    pub items_sent: usize,
    pub chars_sent: usize,
    pub cache_hits: usize,
    pub failed_items: usize,
    pub dropped_spans: usize,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
}

impl Usage {
    /// Counter difference `self - earlier`.
    pub fn since(&self, earlier: &Usage) -> Usage {
        Usage {
            wire_calls: self.wire_calls - earlier.wire_calls,
            items_sent: self.items_sent - earlier.items_sent,
            chars_sent: self.chars_sent - earlier.chars_sent,
            cache_hits: self.cache_hits - earlier.cache_hits,
            failed_items: self.failed_items - earlier.failed_items,
            dropped_spans: self.dropped_spans - earlier.dropped_spans,
            wall_time: self.wall_time.saturating_sub(earlier.wall_time),
        }
    }
}

pub(crate) mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchOptions {
    /// Upper bound on items per request; the descriptor's `max_batch` also applies.
    pub batch: usize,
    /// Worker count for concurrent requests.
    pub parallel: usize,
    pub use_cache: bool,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self {
            batch: usize::MAX,
            parallel: 1,
            use_cache: true,
        }
    }
}

/// Shared, thread-safe front end to a backend.
pub struct Dispatcher {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<dyn ResultCache>>,
    in_flight: usize,
    usage: Mutex<Usage>,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("backend", &self.backend.descriptor().id)
            .field("cached", &self.cache.is_some())
            .field("in_flight", &self.in_flight)
            .finish()
    }
}

struct Prepared<'a, T> {
    keys: Vec<Option<String>>,
    results: Vec<Option<ItemOutcome<T>>>,
    pending: Vec<usize>,
    chars: Vec<usize>,
    items: &'a [(String, String)],
}

impl Dispatcher {
    pub fn new(backend: Arc<dyn Backend>) -> Result<Self, BackendError> {
        backend.descriptor().validate()?;
        Ok(Self {
            backend,
            cache: None,
            in_flight: DEFAULT_IN_FLIGHT,
            usage: Mutex::new(Usage::default()),
        })
    }

    pub fn with_cache(mut self, cache: Arc<dyn ResultCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = limit.max(1);
        self
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        self.backend.descriptor()
    }

    pub fn usage(&self) -> Usage {
        *self.usage.lock().expect("usage lock")
    }

    /// Classifies every item; results are positionally aligned with `items`.
    pub fn classify(
        &self,
        items: &[ClassifyItem],
        opts: &DispatchOptions,
    ) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        if let Some(bad) = items.iter().position(|i| i.label.is_empty()) {
            return Err(BackendError::InvalidRequest(format!("item {bad} has an empty label")));
        }
        let pairs: Vec<(String, String)> = items.iter().map(|i| (i.label.clone(), i.text.clone())).collect();
        self.run(
            Primitive::Label,
            &pairs,
            opts,
            |chunk| {
                let batch: Vec<ClassifyItem> = chunk
                    .iter()
                    .map(|(label, text)| ClassifyItem {
                        text: text.clone(),
                        label: label.clone(),
                    })
                    .collect();
                let out = self.backend.classify_batch(&batch)?;
                Ok((out, 0))
            },
            |r| serde_json::to_value(r).expect("classify result serializes"),
            |v| serde_json::from_value::<ClassifyResult>(v.clone()).ok(),
        )
    }

    /// Extracts spans for every item. Spans are validated against the item
    /// text; invalid ones are dropped and counted in `dropped_spans`.
    pub fn extract(
        &self,
        items: &[ExtractItem],
        opts: &DispatchOptions,
    ) -> Result<Vec<ItemOutcome<Vec<Span>>>, BackendError> {
        if let Some(bad) = items.iter().position(|i| i.instruction.is_empty()) {
            return Err(BackendError::InvalidRequest(format!(
                "item {bad} has an empty instruction"
            )));
        }
        let pairs: Vec<(String, String)> = items.iter().map(|i| (i.instruction.clone(), i.text.clone())).collect();
        self.run(
            Primitive::Span,
            &pairs,
            opts,
            |chunk| {
                let batch: Vec<ExtractItem> = chunk
                    .iter()
                    .map(|(instruction, text)| ExtractItem {
                        text: text.clone(),
                        instruction: instruction.clone(),
                    })
                    .collect();
                let raw = self.backend.extract_batch(&batch)?;
                if raw.len() != batch.len() {
                    return Ok((raw.into_iter().map(|r| r.map(|_| Vec::new())).collect(), 0));
                }
                let mut dropped = 0;
                let out = raw
                    .into_iter()
                    .zip(&batch)
                    .map(|(r, item)| {
                        r.map(|spans| {
                            let (kept, lost) = validate_spans(&item.text, spans);
                            dropped += lost;
                            kept
                        })
                    })
                    .collect();
                Ok((out, dropped))
            },
            |spans| serde_json::json!({ "spans": spans }),
            |v| serde_json::from_value::<Vec<Span>>(v.get("spans")?.clone()).ok(),
        )
    }

    /// Shared pipeline: cache lookup, chunked concurrent dispatch, ordered
    /// reassembly, cache fill and accounting. `items` are (instruction, text).
    fn run<T, Call, Enc, Dec>(
        &self,
        primitive: Primitive,
        items: &[(String, String)],
        opts: &DispatchOptions,
        call: Call,
        encode: Enc,
        decode: Dec,
    ) -> Result<Vec<ItemOutcome<T>>, BackendError>
    where
        T: Clone + Send,
        Call: Fn(&[(String, String)]) -> Result<(Vec<ItemOutcome<T>>, usize), BackendError> + Sync,
        Enc: Fn(&T) -> Value,
        Dec: Fn(&Value) -> Option<T>,
    {
        let desc = self.backend.descriptor();
        let cache = self.cache.as_ref().filter(|_| opts.use_cache);
        let mut prep = Prepared {
            keys: vec![None; items.len()],
            results: (0..items.len()).map(|_| None).collect(),
            pending: Vec::new(),
            chars: items
                .iter()
                .map(|(instr, text)| scalar_len(instr) + scalar_len(text))
                .collect(),
            items,
        };
        let mut hits = 0;
        for (i, (instr, text)) in items.iter().enumerate() {
            if let Some(cache) = cache {
                let key = cache_key(&desc.id, primitive, instr, text);
                let cached = cache.get(&key).and_then(|s| serde_json::from_str::<Value>(&s).ok());
                if let Some(v) = cached.as_ref().and_then(&decode) {
                    prep.results[i] = Some(Ok(v));
                    hits += 1;
                    continue;
                }
                prep.keys[i] = Some(key);
            }
            prep.pending.push(i);
        }

        let chunk_size = desc.max_batch.min(opts.batch.max(1));
        let chunks: Vec<&[usize]> = prep.pending.chunks(chunk_size).collect();
        let workers = opts.parallel.max(1).min(self.in_flight).min(chunks.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<ChunkOutcome<T>>>> = Mutex::new((0..chunks.len()).map(|_| None).collect());

        let work = || loop {
            let c = next.fetch_add(1, Ordering::SeqCst);
            if c >= chunks.len() {
                break;
            }
            let batch: Vec<(String, String)> = chunks[c].iter().map(|&i| prep.items[i].clone()).collect();
            let started = Instant::now();
            let outcome = call(&batch);
            let elapsed = started.elapsed();
            slots.lock().expect("slot lock")[c] = Some(ChunkOutcome { outcome, elapsed });
        };
        if workers <= 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(work);
                }
            });
        }

        let mut usage = Usage {
            cache_hits: hits,
            ..Usage::default()
        };
        let mut first_err = None;
        for (chunk, slot) in chunks.iter().zip(slots.into_inner().expect("slot lock")) {
            let ChunkOutcome { outcome, elapsed } = slot.expect("every chunk ran");
            usage.wire_calls += 1;
            usage.items_sent += chunk.len();
            usage.chars_sent += chunk.iter().map(|&i| prep.chars[i]).sum::<usize>();
            usage.wall_time += match desc.simulated_latency {
                Some(l) => simulated(l, chunk.len()),
                None => elapsed,
            };
            match outcome {
                Err(e) => {
                    first_err.get_or_insert(e);
                }
                Ok((results, dropped)) if results.len() == chunk.len() => {
                    usage.dropped_spans += dropped;
                    for (&i, r) in chunk.iter().zip(results) {
                        if r.is_err() {
                            usage.failed_items += 1;
                        }
                        if let (Ok(v), Some(key), Some(cache)) = (&r, &prep.keys[i], cache) {
                            cache.put(key, &encode(v).to_string());
                        }
                        prep.results[i] = Some(r);
                    }
                }
                Ok((results, _)) => {
                    first_err.get_or_insert(BackendError::ProtocolError(format!(
                        "backend {} returned {} results for {} items",
                        desc.id,
                        results.len(),
                        chunk.len()
                    )));
                }
            }
        }
        self.accumulate(&usage);
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(prep
            .results
            .into_iter()
            .map(|r| r.expect("every item resolved"))
            .collect())
    }

    fn accumulate(&self, delta: &Usage) {
        let mut u = self.usage.lock().expect("usage lock");
        u.wire_calls += delta.wire_calls;
        u.items_sent += delta.items_sent;
        u.chars_sent += delta.chars_sent;
        u.cache_hits += delta.cache_hits;
        u.failed_items += delta.failed_items;
        u.dropped_spans += delta.dropped_spans;
        u.wall_time += delta.wall_time;
    }
}

struct ChunkOutcome<T> {
    outcome: Result<(Vec<ItemOutcome<T>>, usize), BackendError>,
    elapsed: Duration,
}

fn simulated(l: LatencyModel, items: usize) -> Duration {
    Duration::from_secs_f64((l.per_call_ms + l.per_item_ms * items as f64) / 1000.0)
}

/// Keeps in-bounds, surface-consistent, non-overlapping spans (sorted by
/// start, earliest wins). Returns the kept spans and the number dropped.
pub fn validate_spans(text: &str, raw: Vec<RawSpan>) -> (Vec<Span>, usize) {
    let mut candidates: Vec<Span> = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for r in raw {
        let Some(surface) = (r.start < r.end).then(|| slice_scalars(text, r.start, r.end)).flatten() else {
            dropped += 1;
            continue;
        };
        if r.surface.as_deref().is_some_and(|s| s != surface) {
            dropped += 1;
            continue;
        }
        candidates.push(Span {
            start: r.start,
            end: r.end,
            surface: surface.to_string(),
        });
    }
    candidates.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    let mut kept: Vec<Span> = Vec::with_capacity(candidates.len());
    for s in candidates {
        if kept.last().is_some_and(|k| s.start < k.end) {
            dropped += 1;
        } else {
            kept.push(s);
        }
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_key_frames_fields() {
        let a = cache_key("b", Primitive::Span, "i", "ab");
        assert_eq!(a, cache_key("b", Primitive::Span, "i", "ab"));
        assert_eq!(a.len(), 64);
        assert_ne!(
            cache_key("b", Primitive::Span, "ab", "c"),
            cache_key("b", Primitive::Span, "a", "bc")
        );
        assert_ne!(a, cache_key("b", Primitive::Label, "i", "ab"));
    }

    #[test]
    fn yes_threshold() {
        assert_eq!(ClassifyResult::from_score(0.5).unwrap().answer, Answer::Yes);
        assert_eq!(ClassifyResult::from_score(0.4999).unwrap().answer, Answer::No);
        assert!(ClassifyResult::from_score(1.2).is_none());
        assert!(ClassifyResult::from_score(f64::NAN).is_none());
    }

    #[test]
    fn span_validation_drops_bad_spans() {
        let text = "Only $999 now";
        let raw = vec![
            RawSpan {
                start: 5,
                end: 9,
                surface: Some("$999".into()),
            },
            RawSpan {
                start: 5,
                end: 40,
                surface: None,
            },
            RawSpan {
                start: 0,
                end: 4,
                surface: Some("Nope".into()),
            },
            RawSpan {
                start: 6,
                end: 9,
                surface: None,
            },
            RawSpan {
                start: 3,
                end: 3,
                surface: None,
            },
        ];
        let (kept, dropped) = validate_spans(text, raw);
        assert_eq!(kept, vec![Span::from_text(text, 5, 9).unwrap()]);
        assert_eq!(dropped, 4);
    }

    #[test]
    fn descriptor_checks() {
        let mut d = BackendDescriptor::new("x", BackendKind::Mock, 0);
        assert!(d.validate().is_err());
        d.max_batch = 1;
        assert!(d.validate().is_ok());
        d.cost_model.per_call = -1.0;
        assert!(d.validate().is_err());
    }
}
