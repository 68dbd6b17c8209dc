//! Semantics of the two primitives: NLI rendering for `get_label`, BIO
//! encoding/decoding for `get_span`, and repeated-span (NTE) labeling.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_punctuation_token, slice_scalars, tokenize, TokenSequence};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrimitiveError {
    #[error("classification label is empty")]
    EmptyLabel,
    #[error("malformed BIO sequence at position {0}")]
    MalformedBio(usize),
    #[error("tag count {tags} does not match token count {tokens}")]
    LengthMismatch { tags: usize, tokens: usize },
    #[error("span {0} does not align with token boundaries")]
    UnalignedSpan(Span),
    #[error("spans overlap or are out of order")]
    OverlappingSpans,
    #[error("split {split} is outside 1..{tokens}")]
    BadSplit { split: usize, tokens: usize },
    #[error("n-gram bounds {min}..={max} are invalid")]
    BadLengths { min: usize, max: usize },
}

/// A character span, `end` exclusive, in scalar offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl Span {
    /// Builds a span from `text`, `None` when empty or out of bounds.
    pub fn from_text(text: &str, start: usize, end: usize) -> Option<Span> {
        if start >= end {
            return None;
        }
        slice_scalars(text, start, end).map(|s| Span {
            start,
            end,
            surface: s.to_string(),
        })
    }

    /// In bounds, non-empty and surface-consistent with `text`.
    pub fn is_valid_for(&self, text: &str) -> bool {
        self.start < self.end && slice_scalars(text, self.start, self.end) == Some(self.surface.as_str())
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}) {:?}", self.start, self.end, self.surface)
    }
}

/// Extraction result for one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSet {
    pub record_id: String,
    pub spans: Vec<Span>,
}

impl SpanSet {
    pub fn new(record_id: impl Into<String>, spans: Vec<Span>) -> Self {
        Self {
            record_id: record_id.into(),
            spans,
        }
    }
}

/// Sorted by start and pairwise non-overlapping.
pub fn spans_are_ordered(spans: &[Span]) -> bool {
    spans.windows(2).all(|w| w[0].end <= w[1].start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    B,
    I,
    O,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::B => "B",
            Tag::I => "I",
            Tag::O => "O",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BioSequence {
    pub tags: Vec<Tag>,
}

impl BioSequence {
    pub fn all_outside(len: usize) -> Self {
        Self {
            tags: vec![Tag::O; len],
        }
    }
}

// ---------------------------------------------------------------------------
// NLI classification prompt
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NliPrompt {
    pub rendered: String,
    pub label: String,
    pub choices: [&'static str; 2],
}

/// Renders the yes/no entailment prompt a classification proxy is tuned on.
/// The layout, including the space before `?`, must stay byte-identical.
pub fn render_nli_prompt(text: &str, label: &str) -> Result<NliPrompt, PrimitiveError> {
    if label.is_empty() {
        return Err(PrimitiveError::EmptyLabel);
    }
    let rendered = format!(
        "User:\nChoices:\nyes\nno\n{text} Question: Based on above sentence, is the following sentence true or not ?\nThis text is about {label}\nAssistant:\nAnswer:"
    );
    Ok(NliPrompt {
        rendered,
        label: label.to_string(),
        choices: ["yes", "no"],
    })
}

// ---------------------------------------------------------------------------
// BIO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Lenient,
    Strict,
}

/// Turns each maximal `B I*` run into a span. Lenient mode promotes a
/// dangling `I` (after `O` or at position 0) to `B`.
pub fn decode_bio(
    tags: &BioSequence,
    tokens: &TokenSequence,
    text: &str,
    mode: DecodeMode,
) -> Result<Vec<Span>, PrimitiveError> {
    if tags.tags.len() != tokens.len() {
        return Err(PrimitiveError::LengthMismatch {
            tags: tags.tags.len(),
            tokens: tokens.len(),
        });
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let mut prev = Tag::O;
    for (pos, (&tag, tok)) in tags.tags.iter().zip(&tokens.tokens).enumerate() {
        let starts_run = match tag {
            Tag::O => false,
            Tag::B => true,
            Tag::I if prev == Tag::O => {
                if mode == DecodeMode::Strict {
                    return Err(PrimitiveError::MalformedBio(pos));
                }
                true
            }
            Tag::I => false,
        };
        if tag == Tag::O || starts_run {
            if let Some((s, e)) = open.take() {
                spans.push(span_or_panic(text, s, e));
            }
        }
        if starts_run {
            open = Some((tok.start, tok.end));
        } else if tag == Tag::I {
            if let Some((_, e)) = open.as_mut() {
                *e = tok.end;
            }
        }
        prev = tag;
    }
    if let Some((s, e)) = open {
        spans.push(span_or_panic(text, s, e));
    }
    Ok(spans)
}

fn span_or_panic(text: &str, start: usize, end: usize) -> Span {
    Span::from_text(text, start, end).expect("token offsets lie within the text they were computed from")
}

/// Inverse of [`decode_bio`] for token-aligned, non-overlapping spans.
pub fn encode_bio(spans: &[Span], tokens: &TokenSequence) -> Result<BioSequence, PrimitiveError> {
    let mut tags = vec![Tag::O; tokens.len()];
    let mut last_end = 0usize;
    for (k, span) in spans.iter().enumerate() {
        let (first, last) =
            span_token_range(span, tokens).ok_or_else(|| PrimitiveError::UnalignedSpan(span.clone()))?;
        if k > 0 && span.start < last_end {
            return Err(PrimitiveError::OverlappingSpans);
        }
        last_end = span.end;
        tags[first] = Tag::B;
        for t in &mut tags[first + 1..=last] {
            *t = Tag::I;
        }
    }
    Ok(BioSequence { tags })
}

/// Inclusive token index range `[first, last]` of an aligned span.
pub fn span_token_range(span: &Span, tokens: &TokenSequence) -> Option<(usize, usize)> {
    let first = tokens.token_starting_at(span.start)?;
    let last = tokens.token_ending_at(span.end)?;
    (first <= last).then_some((first, last))
}

/// Widens a character span outward to the smallest enclosing token
/// boundaries. `None` when the span touches no token (e.g. pure whitespace).
pub fn snap_to_tokens(text: &str, start: usize, end: usize, tokens: &TokenSequence) -> Option<Span> {
    let covered: Vec<usize> = tokens
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < end && t.end > start)
        .map(|(i, _)| i)
        .collect();
    let (&first, &last) = (covered.first()?, covered.last()?);
    Span::from_text(text, tokens.tokens[first].start, tokens.tokens[last].end)
}

// ---------------------------------------------------------------------------
// Next-tokens extraction labeling
// ---------------------------------------------------------------------------

pub const NTE_DEFAULT_MIN_LEN: usize = 1;
pub const NTE_DEFAULT_MAX_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NteExample {
    pub context: String,
    pub continuation: TokenSequence,
    pub tags: BioSequence,
}

/// Labels the continuation after token `split`: greedily, left to right,
/// each longest token n-gram (`min_len..=max_len`) that also occurs in the
/// context becomes `B I*`. Matching is case-sensitive on surfaces. An
/// n-gram may not begin or end with a punctuation-only token.
pub fn nte_label(text: &str, split: usize, min_len: usize, max_len: usize) -> Result<NteExample, PrimitiveError> {
    if min_len == 0 || min_len > max_len {
        return Err(PrimitiveError::BadLengths {
            min: min_len,
            max: max_len,
        });
    }
    let tokens = tokenize(text);
    if split == 0 || split >= tokens.len() {
        return Err(PrimitiveError::BadSplit {
            split,
            tokens: tokens.len(),
        });
    }
    let surfaces = tokens.surfaces();
    let (ctx, cont) = surfaces.split_at(split);

    let mut seen: HashSet<&[&str]> = HashSet::new();
    for n in min_len..=max_len.min(ctx.len()) {
        seen.extend(ctx.windows(n));
    }

    let mut tags = vec![Tag::O; cont.len()];
    let mut i = 0;
    while i < cont.len() {
        let longest = (min_len..=max_len.min(cont.len() - i)).rev().find(|&n| {
            let gram = &cont[i..i + n];
            !is_punctuation_token(gram[0]) && !is_punctuation_token(gram[n - 1]) && seen.contains(gram)
        });
        match longest {
            Some(n) => {
                tags[i] = Tag::B;
                for t in &mut tags[i + 1..i + n] {
                    *t = Tag::I;
                }
                i += n;
            }
            None => i += 1,
        }
    }

    let context_end = tokens.tokens[split - 1].end;
    Ok(NteExample {
        context: slice_scalars(text, 0, context_end).unwrap_or_default().to_string(),
        continuation: TokenSequence {
            tokens: tokens.tokens[split..].to_vec(),
        },
        tags: BioSequence { tags },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tag::{B, I, O};

    #[test]
    fn nli_prompt_layout() {
        let p = render_nli_prompt("The market crashed.", "finance").unwrap();
        assert!(p.rendered.contains("This text is about finance"));
        assert_eq!(
            p.rendered,
            "User:\nChoices:\nyes\nno\nThe market crashed. Question: Based on above sentence, is the following sentence true or not ?\nThis text is about finance\nAssistant:\nAnswer:"
        );
        assert_eq!(render_nli_prompt("x", "y"), render_nli_prompt("x", "y"));
        assert_eq!(render_nli_prompt("t", ""), Err(PrimitiveError::EmptyLabel));
    }

    fn bio(tags: &[Tag]) -> BioSequence {
        BioSequence { tags: tags.to_vec() }
    }

    #[test]
    fn decode_basic_runs() {
        let text = "a b c d e";
        let toks = tokenize(text);
        let spans = decode_bio(&bio(&[O, B, I, O, B]), &toks, text, DecodeMode::Lenient).unwrap();
        let surfaces: Vec<_> = spans.iter().map(|s| s.surface.as_str()).collect();
        assert_eq!(surfaces, vec!["b c", "e"]);
        assert!(decode_bio(&bio(&[O; 5]), &toks, text, DecodeMode::Lenient)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn decode_dangling_inside() {
        let text = "a b";
        let toks = tokenize(text);
        let lenient = decode_bio(&bio(&[I, O]), &toks, text, DecodeMode::Lenient).unwrap();
        assert_eq!(lenient, vec![Span::from_text(text, 0, 1).unwrap()]);
        assert_eq!(
            decode_bio(&bio(&[I, O]), &toks, text, DecodeMode::Strict),
            Err(PrimitiveError::MalformedBio(0))
        );
        assert_eq!(
            decode_bio(&bio(&[O, I]), &toks, text, DecodeMode::Strict),
            Err(PrimitiveError::MalformedBio(1))
        );
        // B B yields two adjacent spans
        assert_eq!(
            decode_bio(&bio(&[B, B]), &toks, text, DecodeMode::Strict)
                .unwrap()
                .len(),
            2
        );
        assert!(matches!(
            decode_bio(&bio(&[B]), &toks, text, DecodeMode::Lenient),
            Err(PrimitiveError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn encode_cases() {
        let text = "a b c d";
        let toks = tokenize(text);
        let s = Span::from_text(text, 2, 5).unwrap();
        assert_eq!(s.surface, "b c");
        assert_eq!(encode_bio(&[s], &toks).unwrap(), bio(&[O, B, I, O]));
        assert_eq!(encode_bio(&[], &toks).unwrap(), bio(&[O; 4]));

        let hw = "Hello, world!";
        let toks = tokenize(hw);
        let half = Span::from_text(hw, 7, 10).unwrap();
        assert!(matches!(
            encode_bio(&[half], &toks),
            Err(PrimitiveError::UnalignedSpan(_))
        ));

        let a = Span::from_text(text, 0, 3).unwrap();
        let b = Span::from_text(text, 2, 5).unwrap();
        assert_eq!(
            encode_bio(&[a, b], &tokenize(text)),
            Err(PrimitiveError::OverlappingSpans)
        );
    }

    #[test]
    fn snapping_widens_outward() {
        let text = "Hello, world!";
        let toks = tokenize(text);
        assert_eq!(snap_to_tokens(text, 8, 10, &toks).unwrap().surface, "world");
        assert_eq!(snap_to_tokens(text, 3, 9, &toks).unwrap().surface, "Hello, world");
        assert!(snap_to_tokens(text, 6, 7, &toks).is_none());
    }

    #[test]
    fn nte_examples() {
        let text = "Barack Obama visited Paris . Obama praised Paris .";
        let ex = nte_label(text, 5, 1, 5).unwrap();
        assert_eq!(ex.tags, bio(&[B, O, B, O]));
        assert_eq!(ex.context, "Barack Obama visited Paris .");
        assert_eq!(ex.continuation.surfaces(), vec!["Obama", "praised", "Paris", "."]);

        assert_eq!(nte_label("x y x y", 2, 1, 2).unwrap().tags, bio(&[B, I]));
        assert_eq!(nte_label("x y x y", 2, 1, 1).unwrap().tags, bio(&[B, B]));
        assert_eq!(nte_label("one two three four", 2, 1, 8).unwrap().tags, bio(&[O, O]));
        // case-sensitive
        assert_eq!(nte_label("Paris paris", 1, 1, 8).unwrap().tags, bio(&[O]));
    }

    #[test]
    fn nte_rejects_bad_arguments() {
        assert!(matches!(
            nte_label("a b", 0, 1, 2),
            Err(PrimitiveError::BadSplit { .. })
        ));
        assert!(matches!(
            nte_label("a b", 2, 1, 2),
            Err(PrimitiveError::BadSplit { .. })
        ));
        assert!(matches!(
            nte_label("a b", 1, 3, 2),
            Err(PrimitiveError::BadLengths { .. })
        ));
        assert!(matches!(
            nte_label("a b", 1, 0, 2),
            Err(PrimitiveError::BadLengths { .. })
        ));
    }
}
