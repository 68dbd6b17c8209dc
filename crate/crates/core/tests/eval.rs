use std::sync::Arc;

use falconer_core::backends::Dispatcher;
use falconer_core::corpus::Corpus;
use falconer_core::eval::{consistency, render_report, word_f1, EvalError, EvalReport, ReportFormat};
use falconer_core::executor::{execute, Bindings, ExecOptions, FieldValue, ResultSet, Row};
use falconer_core::primitives::{Span, SpanSet};
use falconer_core::testkit;

fn set(corpus: &Corpus, id: &str, ranges: &[(usize, usize)]) -> SpanSet {
    let text = &corpus.get(id).unwrap().text;
    SpanSet::new(
        id,
        ranges
            .iter()
            .map(|&(a, b)| Span::from_text(text, a, b).unwrap())
            .collect(),
    )
}

#[test]
fn half_recall_example() {
    let corpus = Corpus::from_texts(&["a b c d"], "t").unwrap();
    let gold = [set(&corpus, "rec-000000", &[(0, 7)])];
    let pred = [set(&corpus, "rec-000000", &[(0, 3)])];
    let r = word_f1(&pred, &gold, &corpus).unwrap();
    assert_eq!(r.overall.micro_precision, Some(1.0));
    assert_eq!(r.overall.micro_recall, Some(0.5));
    assert!((r.overall.micro_f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let md = render_report(&r, ReportFormat::Markdown);
    assert!(md.contains("| 0.667 |"), "{md}");
}

#[test]
fn identity_and_disjoint() {
    let corpus = Corpus::from_texts(&["Paris and Lagos", "Kyoto"], "t").unwrap();
    let gold = [
        set(&corpus, "rec-000000", &[(0, 5)]),
        set(&corpus, "rec-000001", &[(0, 5)]),
    ];
    assert_eq!(word_f1(&gold, &gold, &corpus).unwrap().overall.micro_f1, Some(1.0));
    let pred = [set(&corpus, "rec-000000", &[(10, 15)])];
    assert_eq!(word_f1(&pred, &gold, &corpus).unwrap().overall.micro_f1, Some(0.0));
    assert_eq!(word_f1(&[], &[], &corpus).unwrap().overall.micro_f1, Some(1.0));
    let ghost = [SpanSet::new("nope", vec![])];
    assert_eq!(
        word_f1(&ghost, &[], &corpus).unwrap_err(),
        EvalError::UnknownRecord("nope".into())
    );
}

#[test]
fn duplicates_need_duplicates() {
    let corpus = Corpus::from_texts(&["Paris met paris"], "t").unwrap();
    let gold = [set(&corpus, "rec-000000", &[(0, 5), (10, 15)])];
    let pred = [set(&corpus, "rec-000000", &[(0, 5)])];
    let r = word_f1(&pred, &gold, &corpus).unwrap();
    let s = r.overall.support.unwrap();
    assert_eq!((s.gold_tokens, s.pred_tokens, s.matched_tokens), (2, 1, 1));
}

fn run_f1() -> (ResultSet, Corpus) {
    let corpus = testkit::ted_corpus();
    let d = Arc::new(Dispatcher::new(Arc::new(testkit::mock_backend())).unwrap());
    let (rs, _) = execute(
        &testkit::f1_plan(),
        &corpus,
        &Bindings::both(d),
        &ExecOptions::default(),
    )
    .unwrap();
    (rs, corpus)
}

#[test]
fn self_consistency_is_perfect() {
    let (rs, corpus) = run_f1();
    let r = consistency(&rs, &rs, &corpus).unwrap();
    assert_eq!(r.overall.accuracy, Some(1.0));
    assert_eq!(r.overall.micro_f1, Some(1.0));
    assert_eq!(r.jaccard, Some(1.0));
}

#[test]
fn one_flipped_decision_in_ten() {
    let texts: Vec<String> = (0..10).map(|i| format!("talk {i}")).collect();
    let corpus = Corpus::from_texts(&texts, "t").unwrap();
    let rows = |flip: bool| ResultSet {
        plan_id: "p".into(),
        rows: corpus
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| Row {
                id: r.id.clone(),
                fields: [(
                    "is_finance".to_string(),
                    FieldValue::Bool((i % 2 == 0) ^ (flip && i == 3)),
                )]
                .into(),
            })
            .collect(),
        ..ResultSet::default()
    };
    let r = consistency(&rows(true), &rows(false), &corpus).unwrap();
    assert!((r.overall.accuracy.unwrap() - 0.9).abs() < 1e-12);
    assert!((r.tasks[0].accuracy.unwrap() - 0.9).abs() < 1e-12);

    // the same disagreement expressed as one extra surviving record
    let (mut a, corpus) = run_f1();
    let b = a.clone();
    let extra = corpus.records().iter().find(|r| b.row(&r.id).is_none()).unwrap();
    a.rows.push(Row {
        id: extra.id.clone(),
        fields: [("spans".to_string(), FieldValue::Spans(vec![]))].into(),
    });
    let r = consistency(&a, &b, &corpus).unwrap();
    assert!((r.overall.accuracy.unwrap() - 7.0 / 8.0).abs() < 1e-12);
    assert!((r.jaccard.unwrap() - 7.0 / 8.0).abs() < 1e-12);
    assert_eq!(r.overall.micro_f1, Some(1.0));
}

#[test]
fn plan_mismatch_is_rejected() {
    let (a, corpus) = run_f1();
    let mut b = a.clone();
    b.plan_id = "other".into();
    assert!(matches!(
        consistency(&a, &b, &corpus),
        Err(EvalError::PlanMismatch { .. })
    ));
}

#[test]
fn reports_render_stably_and_round_trip() {
    let (rs, corpus) = run_f1();
    let r = consistency(&rs, &rs, &corpus).unwrap();
    let json = render_report(&r, ReportFormat::Json);
    assert_eq!(json, render_report(&r, ReportFormat::Json));
    assert_eq!(
        render_report(&r, ReportFormat::Markdown),
        render_report(&r, ReportFormat::Markdown)
    );
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string_pretty(&v).unwrap() + "\n", json);
}
