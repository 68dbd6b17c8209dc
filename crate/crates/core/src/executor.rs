//! Plan evaluation over a corpus.
//!
//! Evaluation is columnar: each node is computed once over every record in
//! its domain, so a Label or Span node turns into a single batched dispatch.
//! A node's domain is the set of records it has a value for. Source covers
//! the corpus, Filter narrows it, primitives lose records whose slot binding
//! is empty or whose item failed, and Bool covers the intersection of its
//! inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backends::{BackendError, ClassifyItem, DispatchOptions, Dispatcher, ExtractItem, Usage};
use crate::corpus::Corpus;
use crate::plan::{topological_order, validate_plan, BoolOp, NodeKind, NodeOp, Plan, PlanNode, ValidationReport};
use crate::primitives::Span;

pub const FILTERED: &str = "filtered";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("plan is invalid: {0}")]
    InvalidPlan(ValidationReport),
    #[error("no backend bound for {0} nodes")]
    UnboundBackend(NodeKind),
    #[error("node {node}: {source}")]
    Backend {
        node: String,
        #[source]
        source: BackendError,
    },
    #[error("node {node}: item for record {record} failed: {reason}")]
    ItemFailed {
        node: String,
        record: String,
        reason: String,
    },
    #[error("reports come from different plans ({a} vs {b})")]
    MismatchedRuns { a: String, b: String },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{path}: malformed results file: {detail}")]
    MalformedResults { path: String, detail: String },
}

impl ExecError {
    /// The backend error behind this failure, if any.
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            ExecError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Which dispatcher serves each primitive kind. Both may share one.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    pub label: Option<Arc<Dispatcher>>,
    pub span: Option<Arc<Dispatcher>>,
}

impl Bindings {
    pub fn both(d: Arc<Dispatcher>) -> Self {
        Self {
            label: Some(d.clone()),
            span: Some(d),
        }
    }

    fn for_kind(&self, kind: NodeKind) -> Option<&Arc<Dispatcher>> {
        match kind {
            NodeKind::Label => self.label.as_ref(),
            NodeKind::Span => self.span.as_ref(),
            _ => None,
        }
    }

    /// Distinct dispatchers, label first.
    fn distinct(&self) -> Vec<&Arc<Dispatcher>> {
        let mut out: Vec<&Arc<Dispatcher>> = Vec::new();
        for d in [&self.label, &self.span].into_iter().flatten() {
            if !out.iter().any(|o| Arc::ptr_eq(o, d)) {
                out.push(d);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub batch: usize,
    pub parallel: usize,
    pub cache: bool,
    /// Abort on the first failed item instead of dropping its record.
    pub strict: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            batch: 64,
            parallel: 1,
            cache: true,
            strict: false,
        }
    }
}

/// A value in an output row. Untagged on the wire: string, bool or span list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Bool(bool),
    Text(String),
    Spans(Vec<Span>),
}

impl FieldValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            FieldValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_spans(&self) -> Option<&[Span]> {
        match self {
            FieldValue::Spans(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub fields: BTreeMap<String, FieldValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResultSet {
    pub plan_id: String,
    /// In corpus order.
    pub rows: Vec<Row>,
    /// Record ids not in `rows`, in corpus order.
    pub dropped: Vec<String>,
    /// Why each dropped record was dropped.
    pub reasons: BTreeMap<String, String>,
}

impl ResultSet {
    pub fn row(&self, id: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BackendCost {
    pub wire_calls: usize,
    pub items_sent: usize,
    pub chars_sent: usize,
    pub cache_hits: usize,
    pub failed_items: usize,
    pub dropped_spans: usize,
    pub estimated_cost: f64,
    #[serde(with = "crate::backends::duration_secs")]
    pub wall_time: Duration,
}

impl BackendCost {
    fn add(&mut self, o: &BackendCost) {
        self.wire_calls += o.wire_calls;
        self.items_sent += o.items_sent;
        self.chars_sent += o.chars_sent;
        self.cache_hits += o.cache_hits;
        self.failed_items += o.failed_items;
        self.dropped_spans += o.dropped_spans;
        self.estimated_cost += o.estimated_cost;
        self.wall_time += o.wall_time;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub plan_id: String,
    pub backends: BTreeMap<String, BackendCost>,
    pub totals: BackendCost,
}

/// Runs `plan` over `corpus`. Deterministic for fixed inputs and backend
/// configurations regardless of `options.parallel`.
pub fn execute(
    plan: &Plan,
    corpus: &Corpus,
    bindings: &Bindings,
    options: &ExecOptions,
) -> Result<(ResultSet, CostReport), ExecError> {
    let report = validate_plan(plan);
    if !report.is_valid() {
        return Err(ExecError::InvalidPlan(report));
    }
    for kind in [NodeKind::Label, NodeKind::Span] {
        if plan.nodes.iter().any(|n| n.kind() == kind) && bindings.for_kind(kind).is_none() {
            return Err(ExecError::UnboundBackend(kind));
        }
    }
    let plan_id = plan.digest().map_err(|_| ExecError::InvalidPlan(report.clone()))?;
    let order = topological_order(plan).map_err(|_| ExecError::InvalidPlan(report))?;
    let before: Vec<Usage> = bindings.distinct().iter().map(|d| d.usage()).collect();

    let mut run = Run {
        corpus,
        options,
        columns: BTreeMap::new(),
        reasons: BTreeMap::new(),
    };
    let mut output = None;
    for &i in &order {
        let node = &plan.nodes[i];
        let column = match &node.op {
            NodeOp::Source => vec![Some(Val::Rec); corpus.len()],
            NodeOp::Filter { predicate, input } => {
                let (p, x) = (&run.columns[predicate.as_str()], &run.columns[input.as_str()]);
                p.iter()
                    .zip(x)
                    .map(|(p, x)| match (p, x) {
                        (Some(Val::Bool(true)), Some(_)) => Some(Val::Rec),
                        _ => None,
                    })
                    .collect()
            }
            NodeOp::Bool { op, inputs } => run.boolean(*op, inputs),
            NodeOp::Label { .. } | NodeOp::Span { .. } => {
                let dispatcher = bindings.for_kind(node.kind()).expect("bindings checked");
                run.primitive(node, dispatcher)?
            }
            NodeOp::Output { fields } => {
                output = Some(fields.clone());
                Vec::new()
            }
        };
        run.columns.insert(node.id.as_str(), column);
    }

    let fields = output.expect("valid plan has an output node");
    let mut result = ResultSet {
        plan_id: plan_id.clone(),
        ..ResultSet::default()
    };
    for (pos, record) in corpus.records().iter().enumerate() {
        let values: Option<BTreeMap<String, FieldValue>> = fields
            .iter()
            .map(|f| {
                let v = run.columns[f.node.as_str()][pos].as_ref()?;
                Some((
                    f.name.clone(),
                    match v {
                        Val::Rec => FieldValue::Text(record.text.clone()),
                        Val::Bool(b) => FieldValue::Bool(*b),
                        Val::Spans(s) => FieldValue::Spans(s.clone()),
                    },
                ))
            })
            .collect();
        match values {
            Some(fields) => result.rows.push(Row {
                id: record.id.clone(),
                fields,
            }),
            None => {
                result.dropped.push(record.id.clone());
                let reason = run.reasons.get(&pos).cloned().unwrap_or_else(|| FILTERED.to_string());
                result.reasons.insert(record.id.clone(), reason);
            }
        }
    }

    let mut cost = CostReport {
        plan_id,
        ..CostReport::default()
    };
    for (d, before) in bindings.distinct().into_iter().zip(&before) {
        let u = d.usage().since(before);
        let c = d.descriptor().cost_model;
        let entry = BackendCost {
            wire_calls: u.wire_calls,
            items_sent: u.items_sent,
            chars_sent: u.chars_sent,
            cache_hits: u.cache_hits,
            failed_items: u.failed_items,
            dropped_spans: u.dropped_spans,
            estimated_cost: c.per_call * u.wire_calls as f64 + c.per_1k_chars * u.chars_sent as f64 / 1000.0,
            wall_time: u.wall_time,
        };
        cost.backends.entry(d.descriptor().id.clone()).or_default().add(&entry);
        cost.totals.add(&entry);
    }
    Ok((result, cost))
}

#[derive(Debug, Clone, PartialEq)]
enum Val {
    Rec,
    Bool(bool),
    Spans(Vec<Span>),
}

type Column = Vec<Option<Val>>;

struct Run<'a> {
    corpus: &'a Corpus,
    options: &'a ExecOptions,
    columns: BTreeMap<&'a str, Column>,
    /// First drop reason per record position.
    reasons: BTreeMap<usize, String>,
}

impl<'a> Run<'a> {
    fn boolean(&self, op: BoolOp, inputs: &[String]) -> Column {
        (0..self.corpus.len())
            .map(|pos| {
                let vals: Option<Vec<bool>> = inputs
                    .iter()
                    .map(|i| match &self.columns[i.as_str()][pos] {
                        Some(Val::Bool(b)) => Some(*b),
                        _ => None,
                    })
                    .collect();
                let vals = vals?;
                Some(Val::Bool(match op {
                    BoolOp::And => vals.iter().all(|&b| b),
                    BoolOp::Or => vals.iter().any(|&b| b),
                    BoolOp::Not => !vals[0],
                }))
            })
            .collect()
    }

    fn primitive(&mut self, node: &'a PlanNode, dispatcher: &Dispatcher) -> Result<Column, ExecError> {
        let (instruction, input) = match &node.op {
            NodeOp::Label { instruction, input } | NodeOp::Span { instruction, input } => (instruction, input),
            _ => unreachable!("primitive called on {}", node.kind()),
        };
        let mut column: Column = vec![None; self.corpus.len()];
        let mut positions = Vec::new();
        let mut texts = Vec::new();
        let mut rendered = Vec::new();
        'records: for (pos, v) in self.columns[input.as_str()].iter().enumerate() {
            if v.is_none() {
                continue;
            }
            let mut values = BTreeMap::new();
            for (slot, source) in &instruction.bindings {
                match &self.columns[source.as_str()][pos] {
                    Some(Val::Spans(spans)) if !spans.is_empty() => {
                        values.insert(slot.clone(), spans[0].surface.clone());
                    }
                    _ => {
                        self.reasons
                            .entry(pos)
                            .or_insert_with(|| format!("empty slot binding {{{slot}}} from {source} at {}", node.id));
                        continue 'records;
                    }
                }
            }
            positions.push(pos);
            texts.push(self.corpus.records()[pos].text.clone());
            rendered.push(instruction.render(&values));
        }
        if positions.is_empty() {
            return Ok(column);
        }
        let opts = DispatchOptions {
            batch: self.options.batch,
            parallel: self.options.parallel,
            use_cache: self.options.cache,
        };
        let wrap = |source| ExecError::Backend {
            node: node.id.clone(),
            source,
        };
        let outcomes: Vec<Result<Val, String>> = if node.kind() == NodeKind::Label {
            let items: Vec<ClassifyItem> = texts
                .into_iter()
                .zip(rendered)
                .map(|(text, label)| ClassifyItem { text, label })
                .collect();
            dispatcher
                .classify(&items, &opts)
                .map_err(wrap)?
                .into_iter()
                .map(|r| r.map(|c| Val::Bool(c.is_yes())))
                .collect()
        } else {
            let items: Vec<ExtractItem> = texts
                .into_iter()
                .zip(rendered)
                .map(|(text, instruction)| ExtractItem { text, instruction })
                .collect();
            dispatcher
                .extract(&items, &opts)
                .map_err(wrap)?
                .into_iter()
                .map(|r| r.map(Val::Spans))
                .collect()
        };
        for (pos, outcome) in positions.into_iter().zip(outcomes) {
            match outcome {
                Ok(v) => column[pos] = Some(v),
                Err(reason) => {
                    let record = &self.corpus.records()[pos].id;
                    if self.options.strict {
                        return Err(ExecError::ItemFailed {
                            node: node.id.clone(),
                            record: record.clone(),
                            reason,
                        });
                    }
                    log::warn!("node {}: dropping record {record}: {reason}", node.id);
                    self.reasons
                        .entry(pos)
                        .or_insert_with(|| format!("item failed at {}: {reason}", node.id));
                }
            }
        }
        Ok(column)
    }
}

/// Wall-time and cost ratios `b / a`. `0/0` is 1 and `x/0` is infinite.
pub fn speedup_ratio(a: &CostReport, b: &CostReport) -> Result<(f64, f64), ExecError> {
    if a.plan_id != b.plan_id {
        return Err(ExecError::MismatchedRuns {
            a: a.plan_id.clone(),
            b: b.plan_id.clone(),
        });
    }
    Ok((
        ratio(b.totals.wall_time.as_secs_f64(), a.totals.wall_time.as_secs_f64()),
        ratio(b.totals.estimated_cost, a.totals.estimated_cost),
    ))
}

fn ratio(num: f64, den: f64) -> f64 {
    match (num == 0.0, den == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => num / den,
    }
}

/// One line per row, then a trailer with drops, cost and plan id.
pub fn results_to_jsonl(results: &ResultSet, cost: &CostReport) -> String {
    let mut out = String::new();
    for row in &results.rows {
        out.push_str(&serde_json::to_value(row).expect("row serializes").to_string());
        out.push('\n');
    }
    let trailer = json!({
        "_dropped": results.dropped,
        "_reasons": results.reasons,
        "_cost": cost,
        "_plan": results.plan_id,
    });
    out.push_str(&trailer.to_string());
    out.push('\n');
    out
}

/// Inverse of [`results_to_jsonl`].
pub fn parse_results_jsonl(raw: &str, source: &str) -> Result<(ResultSet, CostReport), ExecError> {
    let bad = |detail: String| ExecError::MalformedResults {
        path: source.to_string(),
        detail,
    };
    let lines: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    let (trailer, rows) = lines.split_last().ok_or_else(|| bad("empty file".into()))?;
    let trailer: Value = serde_json::from_str(trailer).map_err(|e| bad(format!("trailer: {e}")))?;
    let field = |k: &str| trailer.get(k).cloned().ok_or_else(|| bad(format!("trailer lacks {k}")));
    let mut set = ResultSet {
        plan_id: serde_json::from_value(field("_plan")?).map_err(|e| bad(e.to_string()))?,
        dropped: serde_json::from_value(field("_dropped")?).map_err(|e| bad(e.to_string()))?,
        reasons: serde_json::from_value(trailer.get("_reasons").cloned().unwrap_or(json!({})))
            .map_err(|e| bad(e.to_string()))?,
        rows: Vec::with_capacity(rows.len()),
    };
    let cost: CostReport = serde_json::from_value(field("_cost")?).map_err(|e| bad(e.to_string()))?;
    for (i, line) in rows.iter().enumerate() {
        set.rows
            .push(serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?);
    }
    Ok((set, cost))
}

/// Writes `results.jsonl` and `report.json` into `dir`.
pub fn write_results(dir: &Path, results: &ResultSet, cost: &CostReport) -> Result<(), ExecError> {
    let io = |p: &Path, e: std::io::Error| ExecError::Io {
        path: p.display().to_string(),
        detail: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let results_path = dir.join("results.jsonl");
    fs::write(&results_path, results_to_jsonl(results, cost)).map_err(|e| io(&results_path, e))?;
    let report_path = dir.join("report.json");
    let report =
        serde_json::to_string_pretty(&serde_json::to_value(cost).expect("cost serializes")).expect("value serializes");
    fs::write(&report_path, report + "\n").map_err(|e| io(&report_path, e))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<(ResultSet, CostReport), ExecError> {
    let raw = fs::read_to_string(path).map_err(|e| ExecError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_results_jsonl(&raw, &path.display().to_string())
}
