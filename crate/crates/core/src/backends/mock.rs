//! Deterministic rule-table backend for tests, fixtures and offline runs.
//!
//! Rules file:
//!
//! ```json
//! {"classify": [{"instruction_contains": "finance", "keywords": ["finance", "market"]}],
//!  "extract":  [{"instruction_contains": "price", "patterns": ["$<digits>"]}]}
//! ```
//!
//! The first rule whose `instruction_contains` occurs (case-insensitively) in
//! the label or instruction applies. Classification scores 1.0 when any
//! keyword occurs as a whole token sequence (case-insensitive), else 0.0; an
//! optional `scores` map from exact text to score takes precedence.
//!
//! Patterns are literals plus the classes `<digits>`, `<alpha>`, `<alnum>`
//! and `<Cap>` (an uppercase letter followed by lowercase letters). Classes
//! match greedily without backtracking; `\` escapes the next character.
//! Matches must not start or end inside a word.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, ClassifyItem, ClassifyResult, ExtractItem, ItemOutcome,
    LatencyModel, RawSpan,
};
use crate::corpus::tokenize;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub classify: Vec<ClassifyRule>,
    #[serde(default)]
    pub extract: Vec<ExtractRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRule {
    pub instruction_contains: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractRule {
    pub instruction_contains: String,
    pub patterns: Vec<String>,
}

impl MockRules {
    pub fn from_json(raw: &str) -> Result<Self, BackendError> {
        let rules: MockRules =
            serde_json::from_str(raw).map_err(|e| BackendError::InvalidDescriptor(format!("mock rules: {e}")))?;
        for rule in &rules.extract {
            for p in &rule.patterns {
                Pattern::parse(p)?;
            }
        }
        for rule in &rules.classify {
            if let Some((text, s)) = rule.scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
                return Err(BackendError::InvalidDescriptor(format!(
                    "mock score {s} for {text:?} is outside [0, 1]"
                )));
            }
        }
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidDescriptor(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    /// Short digest of the canonical rules, used as the default backend id.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_value(self).expect("rules serialize").to_string();
        hex::encode(&Sha256::digest(canon.as_bytes())[..6])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Element {
    Lit(char),
    Digits,
    Alpha,
    Alnum,
    Cap,
}

/// Compiled extraction pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    elements: Vec<Element>,
}

impl Pattern {
    pub fn parse(src: &str) -> Result<Self, BackendError> {
        let mut elements = Vec::new();
        let mut chars = src.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '\\' => {
                    let esc = chars
                        .next()
                        .ok_or_else(|| BackendError::InvalidDescriptor(format!("pattern {src:?} ends with '\\'")))?;
                    elements.push(Element::Lit(esc));
                }
                '<' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '>').collect();
                    elements.push(match name.as_str() {
                        "digits" => Element::Digits,
                        "alpha" => Element::Alpha,
                        "alnum" => Element::Alnum,
                        "Cap" => Element::Cap,
                        other => {
                            return Err(BackendError::InvalidDescriptor(format!(
                                "pattern {src:?} uses unknown class <{other}>"
                            )))
                        }
                    });
                }
                c => elements.push(Element::Lit(c)),
            }
        }
        if elements.is_empty() {
            return Err(BackendError::InvalidDescriptor("empty pattern".into()));
        }
        Ok(Self { elements })
    }

    /// Length of the match starting at `at`, if any.
    fn match_at(&self, chars: &[char], at: usize) -> Option<usize> {
        let mut i = at;
        for el in &self.elements {
            let run = |pred: fn(char) -> bool, i: usize| chars[i..].iter().take_while(|&&c| pred(c)).count();
            let n = match el {
                Element::Lit(c) => usize::from(chars.get(i) == Some(c)),
                Element::Digits => run(|c| c.is_ascii_digit(), i),
                Element::Alpha => run(char::is_alphabetic, i),
                Element::Alnum => run(char::is_alphanumeric, i),
                Element::Cap => {
                    if chars.get(i).is_some_and(|c| c.is_uppercase()) {
                        1 + run(char::is_lowercase, i + 1)
                    } else {
                        0
                    }
                }
            };
            if n == 0 {
                return None;
            }
            i += n;
        }
        Some(i - at)
    }

    /// Leftmost non-overlapping matches as scalar (start, end) pairs.
    pub fn find_all(&self, text: &str) -> Vec<(usize, usize)> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let starts_word = i == 0 || !(chars[i].is_alphanumeric() && chars[i - 1].is_alphanumeric());
            if starts_word {
                if let Some(n) = self.match_at(&chars, i) {
                    let end = i + n;
                    let ends_word =
                        end == chars.len() || !(chars[end - 1].is_alphanumeric() && chars[end].is_alphanumeric());
                    if ends_word {
                        out.push((i, end));
                        i = end;
                        continue;
                    }
                }
            }
            i += 1;
        }
        out
    }
}

pub struct MockBackend {
    descriptor: BackendDescriptor,
    rules: MockRules,
    patterns: Vec<Vec<Pattern>>,
}

impl MockBackend {
    /// Mock with id `mock-<fingerprint>`, `max_batch` 64, zero cost and zero
    /// simulated latency.
    pub fn new(rules: MockRules) -> Result<Self, BackendError> {
        let mut descriptor = BackendDescriptor::new(format!("mock-{}", rules.fingerprint()), BackendKind::Mock, 64);
        descriptor.simulated_latency = Some(LatencyModel::default());
        Self::with_descriptor(rules, descriptor)
    }

    pub fn with_descriptor(rules: MockRules, descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let patterns = rules
            .extract
            .iter()
            .map(|r| {
                r.patterns
                    .iter()
                    .map(|p| Pattern::parse(p))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            descriptor,
            rules,
            patterns,
        })
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }

    pub fn score(&self, item: &ClassifyItem) -> f64 {
        let label = item.label.to_lowercase();
        let Some(rule) = self
            .rules
            .classify
            .iter()
            .find(|r| label.contains(&r.instruction_contains.to_lowercase()))
        else {
            return 0.0;
        };
        if let Some(&s) = rule.scores.get(&item.text) {
            return s;
        }
        let text_tokens: Vec<String> = tokenize(&item.text)
            .tokens
            .into_iter()
            .map(|t| t.surface.to_lowercase())
            .collect();
        let hit = rule.keywords.iter().any(|kw| {
            let kw_tokens: Vec<String> = tokenize(kw)
                .tokens
                .into_iter()
                .map(|t| t.surface.to_lowercase())
                .collect();
            !kw_tokens.is_empty() && text_tokens.windows(kw_tokens.len()).any(|w| w == kw_tokens.as_slice())
        });
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub fn spans(&self, item: &ExtractItem) -> Vec<RawSpan> {
        let instruction = item.instruction.to_lowercase();
        let Some(idx) = self
            .rules
            .extract
            .iter()
            .position(|r| instruction.contains(&r.instruction_contains.to_lowercase()))
        else {
            return Vec::new();
        };
        let mut found: Vec<(usize, usize)> = self.patterns[idx].iter().flat_map(|p| p.find_all(&item.text)).collect();
        // earliest start wins, longer first on ties
        found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut kept: Vec<(usize, usize)> = Vec::new();
        for m in found {
            if kept.last().is_none_or(|k| m.0 >= k.1) {
                kept.push(m);
            }
        }
        kept.into_iter()
            .map(|(start, end)| RawSpan {
                start,
                end,
                surface: Some(item.text.chars().skip(start).take(end - start).collect()),
            })
            .collect()
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify_batch(&self, items: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        Ok(items
            .iter()
            .map(|i| ClassifyResult::from_score(self.score(i)).ok_or_else(|| "score out of range".to_string()))
            .collect())
    }

    fn extract_batch(&self, items: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError> {
        Ok(items.iter().map(|i| Ok(self.spans(i))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Answer, DispatchOptions, Dispatcher};
    use std::sync::Arc;

    fn rules() -> MockRules {
        MockRules::from_json(
            r#"{"classify":[{"instruction_contains":"finance","keywords":["finance","market"]},
                            {"instruction_contains":"health","keywords":["mental health"]}],
                "extract":[{"instruction_contains":"price","patterns":["$<digits>"]},
                           {"instruction_contains":"lecturer","patterns":["Jane Doe","<Cap> Okafor"]}]}"#,
        )
        .unwrap()
    }

    fn citem(text: &str, label: &str) -> ClassifyItem {
        ClassifyItem {
            text: text.into(),
            label: label.into(),
        }
    }

    fn eitem(text: &str, instruction: &str) -> ExtractItem {
        ExtractItem {
            text: text.into(),
            instruction: instruction.into(),
        }
    }

    #[test]
    fn classify_by_keyword() {
        let m = MockBackend::new(rules()).unwrap();
        let out = m
            .classify_batch(&[
                citem("The market crashed.", "finance"),
                citem("I love cats.", "finance"),
                citem("Markets are up", "finance"),
                citem("On Mental  Health today", "Is this about health?"),
                citem("The market crashed.", "sports"),
            ])
            .unwrap();
        let scores: Vec<f64> = out.iter().map(|r| r.as_ref().unwrap().score).collect();
        assert_eq!(scores, vec![1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(out[0].as_ref().unwrap().answer, Answer::Yes);
        assert_eq!(out[1].as_ref().unwrap().answer, Answer::No);
    }

    #[test]
    fn extract_by_pattern() {
        let m = MockBackend::new(rules()).unwrap();
        let spans = m.spans(&eitem("Only $999 for this laptop", "Extract the price"));
        assert_eq!(
            spans,
            vec![RawSpan {
                start: 5,
                end: 9,
                surface: Some("$999".into())
            }]
        );
        assert!(m.spans(&eitem("No price here", "Extract the price")).is_empty());
        assert!(m.spans(&eitem("$12 and $7", "Extract the colour")).is_empty());
        let s = m.spans(&eitem("Talk by Jane Doe and Chidi Okafor.", "Extract the lecturer"));
        let surfaces: Vec<_> = s.iter().map(|r| r.surface.clone().unwrap()).collect();
        assert_eq!(surfaces, vec!["Jane Doe", "Chidi Okafor"]);
        // no match inside a longer word
        assert!(m.spans(&eitem("Jane Doest", "lecturer")).is_empty());
    }

    #[test]
    fn pattern_parse_errors() {
        assert!(Pattern::parse("<nope>").is_err());
        assert!(Pattern::parse("").is_err());
        assert!(Pattern::parse("a\\").is_err());
        assert_eq!(Pattern::parse("\\<x").unwrap().find_all("a <x b"), vec![(2, 4)]);
        assert!(MockRules::from_json(r#"{"extract":[{"instruction_contains":"x","patterns":["<bad>"]}]}"#).is_err());
    }

    #[test]
    fn score_table_overrides_keywords() {
        let r = MockRules::from_json(
            r#"{"classify":[{"instruction_contains":"topic","keywords":["x"],"scores":{"doc a":0.25}}]}"#,
        )
        .unwrap();
        let m = MockBackend::new(r).unwrap();
        assert_eq!(m.score(&citem("doc a", "topic")), 0.25);
        assert_eq!(m.score(&citem("doc x", "topic")), 1.0);
    }

    #[test]
    fn chunking_counts_wire_calls() {
        let m = Arc::new(MockBackend::new(rules()).unwrap());
        let d = Dispatcher::new(m).unwrap();
        let items: Vec<_> = (0..1000).map(|i| citem(&format!("market {i}"), "finance")).collect();
        let out = d.classify(&items, &DispatchOptions::default()).unwrap();
        assert_eq!(out.len(), 1000);
        assert_eq!(d.usage().wire_calls, 16);
        assert_eq!(d.usage().items_sent, 1000);
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(rules().fingerprint(), rules().fingerprint());
        assert_ne!(rules().fingerprint(), MockRules::default().fingerprint());
    }
}
