//! OpenAI-compatible chat completions, shared by the planner and the LLM
//! annotator backend.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::http::{join_url, HttpTransport};
use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, ClassifyItem, ClassifyResult, ExtractItem, ItemOutcome,
    RawSpan,
};
use crate::corpus::scalar_len;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn model(&self) -> &str;

    /// Returns the assistant reply text.
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

/// `POST {base}/v1/chat/completions` with temperature 0.
#[derive(Debug, Clone)]
pub struct OpenAiChat {
    base_url: String,
    model: String,
    transport: HttpTransport,
}

impl OpenAiChat {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, transport: HttpTransport) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            transport,
        }
    }
}

impl ChatClient for OpenAiChat {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0,
        });
        let reply = self
            .transport
            .post_json(&join_url(&self.base_url, "/v1/chat/completions"), &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::ProtocolError("chat reply has no choices[0].message.content".into()))
    }
}

/// Finds the first JSON object in free text: a fenced block is preferred,
/// otherwise the first balanced `{...}` that parses.
pub fn extract_json_object(reply: &str) -> Option<Value> {
    for (i, _) in reply.match_indices("```") {
        let body = &reply[i + 3..];
        let body = body.split_once('\n').map_or(body, |(lang, rest)| {
            if lang.trim().chars().all(|c| c.is_ascii_alphanumeric()) {
                rest
            } else {
                body
            }
        });
        if let Some(end) = body.find("```") {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(body[..end].trim()) {
                return Some(v);
            }
        }
    }
    let bytes = reply.as_bytes();
    let mut start = 0;
    while let Some(off) = reply[start..].find('{') {
        let open = start + off;
        if let Some(close) = balanced_end(&bytes[open..]) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&reply[open..open + close]) {
                return Some(v);
            }
        }
        start = open + 1;
    }
    None
}

/// Length of the balanced brace group starting at `s[0] == b'{'`.
fn balanced_end(s: &[u8]) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in s.iter().enumerate() {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

const ANNOTATOR_SYSTEM: &str =
    "You annotate text for information extraction. Reply with one strict JSON object and nothing else.";

/// An LLM reached over chat completions, used as annotator (or as a costly
/// executor baseline). One item per request.
pub struct AnnotatorBackend<C: ChatClient> {
    descriptor: BackendDescriptor,
    client: C,
}

impl<C: ChatClient> AnnotatorBackend<C> {
    pub fn new(mut descriptor: BackendDescriptor, client: C) -> Result<Self, BackendError> {
        if descriptor.kind != BackendKind::LlmAnnotator {
            return Err(BackendError::InvalidDescriptor(format!(
                "annotator backend {} must have kind llm_annotator",
                descriptor.id
            )));
        }
        if descriptor.max_batch != 1 {
            log::info!(
                "annotator {} sends one item per request; max_batch set to 1",
                descriptor.id
            );
            descriptor.max_batch = 1;
        }
        descriptor.validate()?;
        Ok(Self { descriptor, client })
    }

    pub fn classify_prompt(item: &ClassifyItem) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(ANNOTATOR_SYSTEM),
            ChatMessage::user(format!(
                "Text:\n{}\n\nIs this text about {}? Reply {{\"answer\": \"yes\"}} or {{\"answer\": \"no\"}}.",
                item.text, item.label
            )),
        ]
    }

    pub fn extract_prompt(item: &ExtractItem) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(ANNOTATOR_SYSTEM),
            ChatMessage::user(format!(
                "Instruction: {}\n\nText:\n{}\n\nReturn every span of the text that answers the instruction as \
                 {{\"spans\": [{{\"start\": <int>, \"end\": <int>, \"surface\": <string>}}]}}. Offsets count Unicode \
                 characters from 0 and end is exclusive. Return {{\"spans\": []}} when nothing applies.",
                item.instruction, item.text
            )),
        ]
    }

    fn classify_one(&self, item: &ClassifyItem) -> Result<ItemOutcome<ClassifyResult>, BackendError> {
        let reply = self.client.complete(&Self::classify_prompt(item))?;
        Ok(parse_answer(&reply))
    }

    fn extract_one(&self, item: &ExtractItem) -> Result<ItemOutcome<Vec<RawSpan>>, BackendError> {
        let reply = self.client.complete(&Self::extract_prompt(item))?;
        Ok(parse_spans(&reply, &item.text))
    }
}

/// `{"answer": "yes"|"no"}`, optionally with a `score`.
pub(crate) fn parse_answer(reply: &str) -> ItemOutcome<ClassifyResult> {
    let v = extract_json_object(reply).ok_or_else(|| "annotator reply has no JSON object".to_string())?;
    if let Some(score) = v.get("score").and_then(Value::as_f64) {
        return ClassifyResult::from_score(score).ok_or_else(|| format!("score {score} outside [0, 1]"));
    }
    match v
        .get("answer")
        .and_then(Value::as_str)
        .map(str::to_lowercase)
        .as_deref()
    {
        Some("yes") => Ok(ClassifyResult::from_score(1.0).expect("1.0 is a valid score")),
        Some("no") => Ok(ClassifyResult::from_score(0.0).expect("0.0 is a valid score")),
        other => Err(format!("unexpected answer {other:?}")),
    }
}

/// Out-of-bounds offsets reject the whole reply. A surface that disagrees
/// with its offsets is re-anchored at the nearest exact occurrence, or the
/// span is dropped when the surface does not occur.
pub(crate) fn parse_spans(reply: &str, text: &str) -> ItemOutcome<Vec<RawSpan>> {
    let v = extract_json_object(reply).ok_or_else(|| "annotator reply has no JSON object".to_string())?;
    let spans: Vec<RawSpan> = v
        .get("spans")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| format!("bad spans array: {e}"))?
        .ok_or_else(|| "reply has no spans array".to_string())?;
    let len = scalar_len(text);
    if let Some(bad) = spans.iter().find(|s| s.end > len || s.start >= s.end) {
        return Err(format!(
            "span [{}, {}) is out of bounds for text of length {len}",
            bad.start, bad.end
        ));
    }
    let chars: Vec<char> = text.chars().collect();
    Ok(spans
        .into_iter()
        .filter_map(|s| {
            let Some(surface) = s.surface.clone() else {
                return Some(s);
            };
            let actual: String = chars[s.start..s.end].iter().collect();
            if actual == surface {
                return Some(s);
            }
            reanchor(&chars, &surface, s.start).map(|start| RawSpan {
                start,
                end: start + surface.chars().count(),
                surface: Some(surface),
            })
        })
        .collect())
}

fn reanchor(chars: &[char], surface: &str, near: usize) -> Option<usize> {
    let needle: Vec<char> = surface.chars().collect();
    if needle.is_empty() || needle.len() > chars.len() {
        return None;
    }
    (0..=chars.len() - needle.len())
        .filter(|&i| chars[i..i + needle.len()] == needle[..])
        .min_by_key(|&i| i.abs_diff(near))
}

impl<C: ChatClient> Backend for AnnotatorBackend<C> {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify_batch(&self, items: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        items.iter().map(|i| self.classify_one(i)).collect()
    }

    fn extract_batch(&self, items: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError> {
        items.iter().map(|i| self.extract_one(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_fenced_and_bare_json() {
        let fenced = "Sure:\n```json\n{\"a\": 1}\n```\nbye";
        assert_eq!(extract_json_object(fenced), Some(json!({"a": 1})));
        let bare = "Here {not json} then {\"b\": \"}\"} tail";
        assert_eq!(extract_json_object(bare), Some(json!({"b": "}"})));
        assert_eq!(extract_json_object("I cannot help"), None);
        let nested = "x {\"p\": {\"q\": [1, {\"r\": 2}]}} y";
        assert_eq!(extract_json_object(nested), Some(json!({"p": {"q": [1, {"r": 2}]}})));
    }

    #[test]
    fn answers_parse() {
        assert!(parse_answer("{\"answer\": \"Yes\"}").unwrap().is_yes());
        assert!(!parse_answer("{\"answer\": \"no\"}").unwrap().is_yes());
        assert_eq!(parse_answer("{\"score\": 0.7}").unwrap().score, 0.7);
        assert!(parse_answer("{\"answer\": \"maybe\"}").is_err());
        assert!(parse_answer("yes").is_err());
    }

    #[test]
    fn spans_reanchor_or_reject() {
        let text = "Dr. Ada Lovelace spoke. Ada again.";
        let ok = parse_spans(r#"{"spans":[{"start":4,"end":16,"surface":"Ada Lovelace"}]}"#, text).unwrap();
        assert_eq!(ok[0].start, 4);
        let moved = parse_spans(r#"{"spans":[{"start":22,"end":25,"surface":"Ada"}]}"#, text).unwrap();
        assert_eq!((moved[0].start, moved[0].end), (24, 27));
        let gone = parse_spans(r#"{"spans":[{"start":0,"end":3,"surface":"Bob"}]}"#, text).unwrap();
        assert!(gone.is_empty());
        assert!(parse_spans(r#"{"spans":[{"start":30,"end":99}]}"#, text).is_err());
        assert!(parse_spans(r#"{"nothing":1}"#, text).is_err());
    }
}
