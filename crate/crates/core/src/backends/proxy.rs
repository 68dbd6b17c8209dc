//! Client for a remote proxy-model server speaking the batch protocol:
//! `POST {base}/v1/classify` and `POST {base}/v1/extract`.

use serde::Deserialize;
use serde_json::{json, Value};

use super::http::{join_url, HttpTransport};
use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, ClassifyItem, ClassifyResult, ExtractItem, ItemOutcome,
    RawSpan,
};

pub struct ProxyBackend {
    descriptor: BackendDescriptor,
    base_url: String,
    transport: HttpTransport,
}

#[derive(Deserialize)]
struct ClassifyReply {
    results: Vec<Value>,
}

#[derive(Deserialize)]
struct WireClassify {
    score: f64,
    #[serde(default)]
    answer: Option<String>,
}

#[derive(Deserialize)]
struct WireExtract {
    spans: Vec<RawSpan>,
}

fn item_error(v: &Value) -> Option<String> {
    v.get("error")
        .map(|e| e.as_str().map(str::to_string).unwrap_or_else(|| e.to_string()))
}

impl ProxyBackend {
    pub fn new(
        descriptor: BackendDescriptor,
        base_url: impl Into<String>,
        transport: HttpTransport,
    ) -> Result<Self, BackendError> {
        descriptor.validate()?;
        if descriptor.kind != BackendKind::HttpProxy {
            return Err(BackendError::InvalidDescriptor(format!(
                "proxy backend {} must have kind http_proxy",
                descriptor.id
            )));
        }
        Ok(Self {
            descriptor,
            base_url: base_url.into(),
            transport,
        })
    }

    fn results(&self, path: &str, body: Value, expected: usize) -> Result<Vec<Value>, BackendError> {
        let reply = self.transport.post_json(&join_url(&self.base_url, path), &body)?;
        let parsed: ClassifyReply = serde_json::from_value(reply)
            .map_err(|e| BackendError::ProtocolError(format!("{path}: missing results array: {e}")))?;
        if parsed.results.len() != expected {
            return Err(BackendError::ProtocolError(format!(
                "{path}: {} results for {expected} items",
                parsed.results.len()
            )));
        }
        Ok(parsed.results)
    }
}

impl Backend for ProxyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify_batch(&self, items: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        let body = json!({ "items": items });
        let results = self.results("/v1/classify", body, items.len())?;
        Ok(results
            .into_iter()
            .map(|v| {
                if let Some(e) = item_error(&v) {
                    return Err(e);
                }
                let wire: WireClassify = serde_json::from_value(v).map_err(|e| format!("bad classify result: {e}"))?;
                let result = ClassifyResult::from_score(wire.score)
                    .ok_or_else(|| format!("score {} outside [0, 1]", wire.score))?;
                if let Some(a) = wire.answer.as_deref() {
                    if !a.eq_ignore_ascii_case(result.answer.as_str()) {
                        log::warn!(
                            "proxy answer {a:?} disagrees with score {}; using the score",
                            wire.score
                        );
                    }
                }
                Ok(result)
            })
            .collect())
    }

    fn extract_batch(&self, items: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError> {
        let body = json!({ "items": items });
        let results = self.results("/v1/extract", body, items.len())?;
        Ok(results
            .into_iter()
            .map(|v| {
                if let Some(e) = item_error(&v) {
                    return Err(e);
                }
                serde_json::from_value::<WireExtract>(v)
                    .map(|w| w.spans)
                    .map_err(|e| format!("bad extract result: {e}"))
            })
            .collect())
    }
}
