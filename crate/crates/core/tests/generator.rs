use std::collections::BTreeMap;
use std::sync::Arc;

use falconer_core::backends::{
    Answer, Backend, BackendDescriptor, BackendError, BackendKind, ClassifyItem, ClassifyResult, DispatchOptions,
    Dispatcher, ExtractItem, ItemOutcome, MemoryCache, MockBackend, MockRules, RawSpan,
};
use falconer_core::corpus::{tokenize, Corpus};
use falconer_core::generator::{
    degrade_spans, emit_dataset, generate_classification_set, generate_extraction_set, load_dataset, Examples,
    GeneratorError, SetKind, TrainingSet,
};
use falconer_core::primitives::{decode_bio, span_token_range, DecodeMode, Span};
use falconer_core::testkit;

/// Mock whose "finance" rule scores each text from a table.
fn scored(texts: &[String], scores: &[f64]) -> Dispatcher {
    let table: BTreeMap<String, f64> = texts.iter().cloned().zip(scores.iter().copied()).collect();
    let rules = serde_json::json!({
        "classify": [{"instruction_contains": "finance", "keywords": [], "scores": table}],
        "extract": []
    });
    let rules = MockRules::from_json(&rules.to_string()).unwrap();
    Dispatcher::new(Arc::new(MockBackend::new(rules).unwrap())).unwrap()
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("record {i}")).collect()
}

fn ids(set: &TrainingSet, answer: Answer) -> Vec<String> {
    match &set.examples {
        Examples::Classification(e) => e
            .iter()
            .filter(|x| x.answer == answer)
            .map(|x| x.record_id.clone())
            .collect(),
        Examples::Extraction(_) => panic!("not a classification set"),
    }
}

#[test]
fn worked_ranking_example() {
    let t = texts(5);
    let corpus = Corpus::from_texts(&t, "t").unwrap();
    let d = scored(&t, &[0.9, 0.1, 0.8, 0.2, 0.5]);
    let set = generate_classification_set(&corpus, "finance", 2, &d, &DispatchOptions::default()).unwrap();
    assert_eq!(ids(&set, Answer::Yes), ["rec-000000", "rec-000002"]);
    assert_eq!(ids(&set, Answer::No), ["rec-000001", "rec-000003"]);
    let Examples::Classification(ex) = &set.examples else {
        unreachable!()
    };
    assert_eq!(ex.iter().map(|e| e.score).collect::<Vec<_>>(), [0.9, 0.8, 0.1, 0.2]);
}

#[test]
fn ties_fall_back_to_corpus_order() {
    let t = texts(4);
    let corpus = Corpus::from_texts(&t, "t").unwrap();
    let d = scored(&t, &[0.5; 4]);
    let set = generate_classification_set(&corpus, "finance", 1, &d, &DispatchOptions::default()).unwrap();
    assert_eq!(ids(&set, Answer::Yes), ["rec-000000"]);
    assert_eq!(ids(&set, Answer::No), ["rec-000003"]);
}

#[test]
fn too_small_corpus_is_rejected() {
    let t = texts(3);
    let corpus = Corpus::from_texts(&t, "t").unwrap();
    let err = generate_classification_set(
        &corpus,
        "finance",
        2,
        &scored(&t, &[0.1; 3]),
        &DispatchOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        GeneratorError::CorpusTooSmall {
            needed: 4,
            available: 3
        }
    ));
}

#[test]
fn classification_dataset_files() {
    let corpus = testkit::ted_corpus();
    let d = Dispatcher::new(Arc::new(testkit::mock_backend())).unwrap();
    let set = generate_classification_set(&corpus, "finance", 5, &d, &DispatchOptions::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let m1 = emit_dataset(&set, tmp.path()).unwrap();
    let data = std::fs::read_to_string(tmp.path().join("classification.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 10);
    let lines: Vec<serde_json::Value> = data.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["answer"] == "yes").count(), 5);
    assert!(lines[0]["prompt"]
        .as_str()
        .unwrap()
        .contains("This text is about finance\n"));
    assert_eq!(m1.counts["yes"], 5);
    assert_eq!(m1.schema, "ds-v1");

    let manifest_a = std::fs::read(tmp.path().join("manifest.json")).unwrap();
    let m2 = emit_dataset(&set, tmp.path()).unwrap();
    assert_eq!(m1.digest, m2.digest);
    assert_eq!(manifest_a, std::fs::read(tmp.path().join("manifest.json")).unwrap());

    let (loaded, _) = load_dataset(tmp.path()).unwrap();
    assert_eq!(loaded, set);
}

#[test]
fn extraction_set_covers_corpus_when_n_is_everything() {
    let corpus = testkit::ted_corpus();
    let d = Dispatcher::new(Arc::new(testkit::mock_backend())).unwrap();
    let set = generate_extraction_set(
        &corpus,
        "Extract the lecturer",
        corpus.len(),
        3,
        &d,
        &DispatchOptions::default(),
    )
    .unwrap();
    let Examples::Extraction(ex) = &set.examples else {
        unreachable!()
    };
    let got: Vec<&str> = ex.iter().map(|e| e.record_id.as_str()).collect();
    let all: Vec<&str> = corpus.records().iter().map(|r| r.id.as_str()).collect();
    assert_eq!(got, all);
    for e in ex {
        let decoded = decode_bio(&e.bio, &tokenize(&e.text), &e.text, DecodeMode::Strict).unwrap();
        assert_eq!(decoded, e.spans);
    }
    assert_eq!(set.provenance.seed, Some(3));
}

#[test]
fn extraction_is_reproducible_with_cache() {
    let corpus = testkit::ted_corpus();
    let d = Dispatcher::new(Arc::new(testkit::mock_backend()))
        .unwrap()
        .with_cache(Arc::new(MemoryCache::new()));
    let run =
        || generate_extraction_set(&corpus, "Extract the lecturer", 8, 42, &d, &DispatchOptions::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let (ta, tb) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(
        emit_dataset(&a, ta.path()).unwrap().digest,
        emit_dataset(&b, tb.path()).unwrap().digest
    );
    assert_eq!(d.usage().wire_calls, 1);
    assert!(matches!(
        generate_extraction_set(&corpus, "x", 21, 0, &d, &DispatchOptions::default()),
        Err(GeneratorError::Corpus(_))
    ));
}

/// Mid-token spans for most texts, an item failure for texts starting with "bad".
struct Misaligned;

impl Backend for Misaligned {
    fn descriptor(&self) -> &BackendDescriptor {
        static D: std::sync::OnceLock<BackendDescriptor> = std::sync::OnceLock::new();
        D.get_or_init(|| BackendDescriptor::new("misaligned", BackendKind::LlmAnnotator, 1))
    }

    fn classify_batch(&self, _: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        unimplemented!()
    }

    fn extract_batch(&self, items: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError> {
        Ok(items
            .iter()
            .map(|i| {
                if i.text.starts_with("bad") {
                    Err("offsets out of bounds".into())
                } else {
                    // "ovel" inside "Lovelace", and "e sp" across two words
                    Ok(vec![
                        RawSpan {
                            start: 5,
                            end: 9,
                            surface: None,
                        },
                        RawSpan {
                            start: 11,
                            end: 15,
                            surface: None,
                        },
                    ])
                }
            })
            .collect())
    }
}

#[test]
fn misaligned_spans_snap_outward() {
    let corpus = Corpus::from_texts(&["Ada Lovelace spoke twice.", "bad reply here"], "t").unwrap();
    let d = Dispatcher::new(Arc::new(Misaligned)).unwrap();
    let set = generate_extraction_set(&corpus, "Extract names", 2, 0, &d, &DispatchOptions::default()).unwrap();
    let Examples::Extraction(ex) = &set.examples else {
        unreachable!()
    };
    let surfaces: Vec<&str> = ex[0].spans.iter().map(|s| s.surface.as_str()).collect();
    assert_eq!(surfaces, ["Lovelace spoke"]);
    assert!(ex[1].spans.is_empty());
    let decoded = decode_bio(&ex[0].bio, &tokenize(&ex[0].text), &ex[0].text, DecodeMode::Strict).unwrap();
    assert_eq!(decoded, ex[0].spans);
}

#[test]
fn degradation_keeps_ends() {
    let corpus = testkit::ted_corpus();
    let d = Dispatcher::new(Arc::new(testkit::mock_backend())).unwrap();
    let set = generate_extraction_set(&corpus, "Extract the lecturer", 20, 0, &d, &DispatchOptions::default()).unwrap();
    let degraded = degrade_spans(&set, 9).unwrap();
    assert_eq!(degraded, degrade_spans(&set, 9).unwrap());
    assert!(degraded.provenance.notes.contains(&"degraded, seed=9".to_string()));
    let (Examples::Extraction(before), Examples::Extraction(after)) = (&set.examples, &degraded.examples) else {
        unreachable!()
    };
    for (b, a) in before.iter().zip(after) {
        assert_eq!(b.spans.len(), a.spans.len());
        let tokens = tokenize(&b.text);
        for (x, y) in b.spans.iter().zip(&a.spans) {
            assert_eq!(
                span_token_range(x, &tokens).unwrap().1,
                span_token_range(y, &tokens).unwrap().1
            );
            assert!(y.start <= x.start || y.end == x.end);
        }
    }

    let classification = generate_classification_set(&corpus, "finance", 2, &d, &DispatchOptions::default()).unwrap();
    assert!(matches!(
        degrade_spans(&classification, 0),
        Err(GeneratorError::WrongKind {
            expected: SetKind::Extraction,
            ..
        })
    ));
}

#[test]
fn adjacent_spans_never_overlap_after_degradation() {
    let text = "one two three four five six seven eight";
    let tokens = tokenize(text);
    let span = |a: usize, b: usize| Span::from_text(text, tokens.tokens[a].start, tokens.tokens[b].end).unwrap();
    let spans = vec![span(1, 2), span(3, 3), span(5, 7)];
    let bio = falconer_core::primitives::encode_bio(&spans, &tokens).unwrap();
    let set = TrainingSet {
        label_or_instruction: "x".into(),
        examples: Examples::Extraction(vec![falconer_core::generator::ExtractionExample {
            record_id: "r".into(),
            text: text.into(),
            spans,
            bio,
        }]),
        provenance: Default::default(),
    };
    for seed in 0..200 {
        let out = degrade_spans(&set, seed).unwrap();
        let Examples::Extraction(ex) = &out.examples else {
            unreachable!()
        };
        let ends: Vec<usize> = ex[0]
            .spans
            .iter()
            .map(|s| span_token_range(s, &tokens).unwrap().1)
            .collect();
        assert_eq!(ends, [2, 3, 7]);
        assert!(falconer_core::primitives::spans_are_ordered(&ex[0].spans));
    }
}

#[test]
fn emitted_extraction_round_trips() {
    let corpus = testkit::ted_corpus();
    let d = Dispatcher::new(Arc::new(testkit::mock_backend())).unwrap();
    let set = generate_extraction_set(&corpus, "Extract the lecturer", 12, 5, &d, &DispatchOptions::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let manifest = emit_dataset(&set, tmp.path()).unwrap();
    assert_eq!(manifest.kind, SetKind::Extraction);
    let line: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(tmp.path().join("extraction.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    for key in ["text", "instruction", "spans", "bio", "tokens"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    let (loaded, _) = load_dataset(tmp.path()).unwrap();
    assert_eq!(loaded, set);

    std::fs::write(tmp.path().join("extraction.jsonl"), "tampered\n").unwrap();
    assert!(matches!(
        load_dataset(tmp.path()),
        Err(GeneratorError::Malformed { .. })
    ));
}
