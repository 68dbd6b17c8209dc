use std::collections::BTreeSet;
use std::sync::Arc;

use falconer_core::backends::{
    Backend, BackendDescriptor, BackendError, BackendKind, ClassifyItem, ClassifyResult, Dispatcher, ExtractItem,
    ItemOutcome, LatencyModel, MemoryCache, MockBackend, RawSpan,
};
use falconer_core::corpus::Corpus;
use falconer_core::executor::{
    execute, parse_results_jsonl, results_to_jsonl, speedup_ratio, Bindings, ExecError, ExecOptions, FieldValue,
};
use falconer_core::plan::{parse_plan, NodeKind};
use falconer_core::testkit::{self, TED_FINANCE_IDS};

fn mock_dispatcher() -> Arc<Dispatcher> {
    Arc::new(Dispatcher::new(Arc::new(testkit::mock_backend())).unwrap())
}

fn opts(parallel: usize) -> ExecOptions {
    ExecOptions {
        batch: 4,
        parallel,
        cache: false,
        strict: false,
    }
}

#[test]
fn finance_lecturer_extracts_only_survivors() {
    let d = mock_dispatcher();
    let corpus = testkit::ted_corpus();
    let (rs, cost) = execute(&testkit::f1_plan(), &corpus, &Bindings::both(d.clone()), &opts(1)).unwrap();

    let ids: Vec<&str> = rs.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, TED_FINANCE_IDS);
    for row in &rs.rows {
        let spans = row.fields["spans"].as_spans().unwrap();
        assert_eq!(spans.len(), 1, "{}", row.id);
        let text = &corpus.get(&row.id).unwrap().text;
        assert!(text.starts_with(&spans[0].surface), "{}", row.id);
        assert_eq!(row.fields["text"], FieldValue::Text(text.clone()));
    }
    assert_eq!(rs.dropped.len(), 13);
    assert!(rs.reasons.values().all(|r| r == "filtered"));
    // 20 classify items plus 7 extract items
    assert_eq!(cost.totals.items_sent, 27);
    assert_eq!(d.usage().items_sent, 27);
}

#[test]
fn extract_counter_sees_seven_items() {
    let label = mock_dispatcher();
    let span = mock_dispatcher();
    let bindings = Bindings {
        label: Some(label.clone()),
        span: Some(span.clone()),
    };
    execute(&testkit::f1_plan(), &testkit::ted_corpus(), &bindings, &opts(1)).unwrap();
    assert_eq!(span.usage().items_sent, 7);
    assert_eq!(label.usage().items_sent, 20);
}

#[test]
fn and_equals_intersection_of_single_filters() {
    let corpus = testkit::ted_corpus();
    let b = Bindings::both(mock_dispatcher());
    let (both, _) = execute(&testkit::health_brain_plan(), &corpus, &b, &opts(1)).unwrap();
    let single = |label: &str| {
        let plan = falconer_core::plan::make_filter_extract(label, "Extract the lecturer").unwrap();
        let (rs, _) = execute(&plan, &corpus, &b, &opts(1)).unwrap();
        rs.rows.into_iter().map(|r| r.id).collect::<BTreeSet<_>>()
    };
    let expected: BTreeSet<String> = single("health").intersection(&single("brain")).cloned().collect();
    let got: BTreeSet<String> = both.rows.iter().map(|r| r.id.clone()).collect();
    assert_eq!(got, expected);
    assert_eq!(got, BTreeSet::from(["ted-12".to_string(), "ted-16".to_string()]));
}

#[test]
fn echo_plan_costs_nothing() {
    let plan = parse_plan(
        r#"{"version":"plan-v1","nodes":[{"id":"s","kind":"Source"},
            {"id":"o","kind":"Output","fields":[{"name":"text","node":"s"}]}],"output":"o"}"#,
    )
    .unwrap();
    let corpus = testkit::ted_corpus();
    let (rs, cost) = execute(&plan, &corpus, &Bindings::default(), &opts(1)).unwrap();
    assert_eq!(rs.rows.len(), 20);
    assert!(rs.dropped.is_empty());
    assert_eq!(cost.totals.wire_calls, 0);
    assert_eq!(cost.totals.estimated_cost, 0.0);
}

#[test]
fn missing_binding_is_reported() {
    let err = execute(
        &testkit::f1_plan(),
        &testkit::ted_corpus(),
        &Bindings {
            label: Some(mock_dispatcher()),
            span: None,
        },
        &opts(1),
    )
    .unwrap_err();
    assert!(matches!(err, ExecError::UnboundBackend(NodeKind::Span)));
}

#[test]
fn parallelism_does_not_change_results() {
    let corpus = testkit::ted_corpus();
    let run = |p| {
        let (rs, cost) = execute(
            &testkit::f1_plan(),
            &corpus,
            &Bindings::both(mock_dispatcher()),
            &opts(p),
        )
        .unwrap();
        results_to_jsonl(&rs, &cost)
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn cached_rerun_issues_no_wire_calls() {
    let corpus = testkit::ted_corpus();
    let d = Arc::new(
        Dispatcher::new(Arc::new(testkit::mock_backend()))
            .unwrap()
            .with_cache(Arc::new(MemoryCache::new())),
    );
    let o = ExecOptions { cache: true, ..opts(2) };
    let (first, c1) = execute(&testkit::f1_plan(), &corpus, &Bindings::both(d.clone()), &o).unwrap();
    let (second, c2) = execute(&testkit::f1_plan(), &corpus, &Bindings::both(d), &o).unwrap();
    assert_eq!(first, second);
    assert!(c1.totals.wire_calls > 0);
    assert_eq!(c2.totals.wire_calls, 0);
    assert_eq!(c2.totals.cache_hits, 27);
    assert_eq!(
        c1.totals.items_sent + c1.totals.cache_hits,
        c2.totals.items_sent + c2.totals.cache_hits
    );
}

#[test]
fn slot_bindings_feed_downstream_instructions() {
    let plan = parse_plan(
        r#"{"version":"plan-v1","nodes":[
            {"id":"s","kind":"Source"},
            {"id":"who","kind":"Span","instruction":"Extract the lecturer","input":"s"},
            {"id":"where","kind":"Span","instruction":{"template":"Extract the location where {person} speaks","bindings":{"person":"who"}},"input":"s"},
            {"id":"o","kind":"Output","fields":[{"name":"who","node":"who"},{"name":"where","node":"where"}]}],
          "output":"o"}"#,
    )
    .unwrap();
    let corpus = Corpus::from_texts(
        &[
            "Ada Lovelace speaks in Paris.",
            "Nobody speaks in Lima.",
            "Alan Turing stays home.",
        ],
        "t",
    )
    .unwrap();
    let (rs, _) = execute(&plan, &corpus, &Bindings::both(mock_dispatcher()), &opts(1)).unwrap();
    assert_eq!(rs.rows.len(), 2);
    assert_eq!(rs.rows[0].fields["where"].as_spans().unwrap()[0].surface, "Paris");
    assert!(rs.rows[1].fields["where"].as_spans().unwrap().is_empty());
    assert_eq!(rs.dropped.len(), 1);
    assert!(rs.reasons.values().next().unwrap().contains("empty slot binding"));
}

/// Fails classification for texts containing "poison".
struct Flaky;

impl Backend for Flaky {
    fn descriptor(&self) -> &BackendDescriptor {
        static D: std::sync::OnceLock<BackendDescriptor> = std::sync::OnceLock::new();
        D.get_or_init(|| BackendDescriptor::new("flaky", BackendKind::Mock, 8))
    }

    fn classify_batch(&self, items: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        Ok(items
            .iter()
            .map(|i| {
                if i.text.contains("poison") {
                    Err("model refused".to_string())
                } else {
                    Ok(ClassifyResult::from_score(1.0).unwrap())
                }
            })
            .collect())
    }

    fn extract_batch(&self, items: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError> {
        Ok(items.iter().map(|_| Ok(vec![])).collect())
    }
}

#[test]
fn item_failures_drop_records_unless_strict() {
    let corpus = Corpus::from_texts(&["fine", "poison pill", "also fine"], "t").unwrap();
    let b = Bindings::both(Arc::new(Dispatcher::new(Arc::new(Flaky)).unwrap()));
    let (rs, cost) = execute(&testkit::f1_plan(), &corpus, &b, &opts(1)).unwrap();
    assert_eq!(rs.rows.len(), 2);
    assert_eq!(rs.dropped, vec!["rec-000001"]);
    assert!(rs.reasons["rec-000001"].contains("model refused"));
    assert_eq!(cost.totals.failed_items, 1);

    let strict = ExecOptions {
        strict: true,
        ..opts(1)
    };
    let err = execute(&testkit::f1_plan(), &corpus, &b, &strict).unwrap_err();
    assert!(matches!(err, ExecError::ItemFailed { .. }), "{err}");
}

/// Every wire call fails.
struct Down;

impl Backend for Down {
    fn descriptor(&self) -> &BackendDescriptor {
        static D: std::sync::OnceLock<BackendDescriptor> = std::sync::OnceLock::new();
        D.get_or_init(|| BackendDescriptor::new("down", BackendKind::HttpProxy, 8))
    }

    fn classify_batch(&self, _: &[ClassifyItem]) -> Result<Vec<ItemOutcome<ClassifyResult>>, BackendError> {
        Err(BackendError::BackendUnavailable("connection refused".into()))
    }

    fn extract_batch(&self, _: &[ExtractItem]) -> Result<Vec<ItemOutcome<Vec<RawSpan>>>, BackendError> {
        Err(BackendError::BackendUnavailable("connection refused".into()))
    }
}

#[test]
fn transport_failure_aborts_with_node_id() {
    let b = Bindings::both(Arc::new(Dispatcher::new(Arc::new(Down)).unwrap()));
    let err = execute(&testkit::f1_plan(), &testkit::ted_corpus(), &b, &opts(1)).unwrap_err();
    match err {
        ExecError::Backend { node, source } => {
            assert_eq!(node, "is_finance");
            assert!(matches!(source, BackendError::BackendUnavailable(_)));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn results_file_round_trips() {
    let (rs, cost) = execute(
        &testkit::f1_plan(),
        &testkit::ted_corpus(),
        &Bindings::both(mock_dispatcher()),
        &opts(1),
    )
    .unwrap();
    let text = results_to_jsonl(&rs, &cost);
    assert_eq!(text.lines().count(), 8);
    let (back, back_cost) = parse_results_jsonl(&text, "mem").unwrap();
    assert_eq!(back, rs);
    assert_eq!(back_cost, cost);
}

fn costed(id: &str, per_call: f64, per_1k: f64, per_item_ms: f64) -> Arc<Dispatcher> {
    let mut desc = BackendDescriptor::new(id, BackendKind::Mock, 16);
    desc.cost_model.per_call = per_call;
    desc.cost_model.per_1k_chars = per_1k;
    desc.simulated_latency = Some(LatencyModel {
        per_call_ms: 0.0,
        per_item_ms,
    });
    Arc::new(
        Dispatcher::new(Arc::new(
            MockBackend::with_descriptor(testkit::mock_rules(), desc).unwrap(),
        ))
        .unwrap(),
    )
}

#[test]
fn speedup_ratio_compares_runs() {
    let corpus = testkit::ted_corpus();
    let plan = testkit::f1_plan();
    let (_, a) = execute(
        &plan,
        &corpus,
        &Bindings::both(costed("proxy", 0.0, 0.1, 1.0)),
        &opts(1),
    )
    .unwrap();
    let (_, b) = execute(&plan, &corpus, &Bindings::both(costed("llm", 0.0, 1.0, 20.0)), &opts(1)).unwrap();
    let (speed, cost) = speedup_ratio(&a, &b).unwrap();
    assert!((speed - 20.0).abs() < 1e-9, "{speed}");
    assert!((cost - 10.0).abs() < 1e-9, "{cost}");
    assert_eq!(speedup_ratio(&a, &a).unwrap(), (1.0, 1.0));

    let other = falconer_core::plan::make_filter_extract("brain", "Extract the lecturer").unwrap();
    let (_, c) = execute(
        &other,
        &corpus,
        &Bindings::both(costed("proxy", 0.0, 0.1, 1.0)),
        &opts(1),
    )
    .unwrap();
    assert!(matches!(speedup_ratio(&a, &c), Err(ExecError::MismatchedRuns { .. })));
}

#[test]
fn cost_model_arithmetic() {
    let d = costed("proxy", 0.5, 2.0, 0.0);
    let (_, cost) = execute(
        &testkit::f1_plan(),
        &testkit::ted_corpus(),
        &Bindings::both(d.clone()),
        &opts(1),
    )
    .unwrap();
    let u = d.usage();
    let expected = 0.5 * u.wire_calls as f64 + 2.0 * u.chars_sent as f64 / 1000.0;
    assert!((cost.totals.estimated_cost - expected).abs() < 1e-12);
    assert_eq!(cost.backends["proxy"].wire_calls, u.wire_calls);
}

#[test]
fn nested_filters_narrow_the_domain() {
    let plan = parse_plan(
        r#"{"version":"plan-v1","nodes":[
            {"id":"s","kind":"Source"},
            {"id":"h","kind":"Label","instruction":"health","input":"s"},
            {"id":"hs","kind":"Filter","predicate":"h","input":"s"},
            {"id":"b","kind":"Label","instruction":"brain","input":"hs"},
            {"id":"hb","kind":"Filter","predicate":"b","input":"hs"},
            {"id":"who","kind":"Span","instruction":"Extract the lecturer","input":"hb"},
            {"id":"o","kind":"Output","fields":[{"name":"spans","node":"who"}]}],"output":"o"}"#,
    )
    .unwrap();
    let corpus = testkit::ted_corpus();
    let health = {
        let plan = falconer_core::plan::make_filter_extract("health", "Extract the lecturer").unwrap();
        execute(&plan, &corpus, &Bindings::both(mock_dispatcher()), &opts(1))
            .unwrap()
            .0
            .rows
            .len()
    };
    let (label, span) = (mock_dispatcher(), mock_dispatcher());
    let bindings = Bindings {
        label: Some(label.clone()),
        span: Some(span.clone()),
    };
    let (rs, _) = execute(&plan, &corpus, &bindings, &opts(1)).unwrap();
    let ids: Vec<&str> = rs.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["ted-12", "ted-16"]);
    // the second label only sees records that passed the first filter
    assert_eq!(label.usage().items_sent, 20 + health);
    assert_eq!(span.usage().items_sent, 2);
}
