//! Word-level F1, run-to-run consistency and report rendering.
//!
//! Spans are compared as multisets of lowercased tok-v1 token surfaces; a
//! token counts for a span when it overlaps it. Scores are micro-averaged
//! over records.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Corpus};
use crate::executor::{FieldValue, ResultSet};
use crate::primitives::{Span, SpanSet};

pub const TOKEN_MATCHING: &str = "tok-v1 surfaces, lowercased, multiset intersection";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("record {0} is not in the corpus")]
    UnknownRecord(String),
    #[error("runs come from different plans ({a} vs {b})")]
    PlanMismatch { a: String, b: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Support {
    pub gold_tokens: usize,
    pub pred_tokens: usize,
    pub matched_tokens: usize,
}

impl Support {
    fn add(&mut self, o: Support) {
        self.gold_tokens += o.gold_tokens;
        self.pred_tokens += o.pred_tokens;
        self.matched_tokens += o.matched_tokens;
    }

    /// (precision, recall, f1) under the 0/0 conventions: an empty side has
    /// perfect precision (or recall), and two empty sides score F1 = 1.
    pub fn scores(&self) -> (f64, f64, f64) {
        let div = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        let p = div(self.matched_tokens, self.pred_tokens);
        let r = div(self.matched_tokens, self.gold_tokens);
        let f1 = if self.gold_tokens == 0 && self.pred_tokens == 0 {
            1.0
        } else if self.matched_tokens == 0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Support>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Number of records scored.
    pub records: usize,
}

impl TaskEval {
    fn spans(task: &str, support: Support, records: usize) -> Self {
        let (p, r, f1) = support.scores();
        Self {
            task: task.to_string(),
            micro_precision: Some(p),
            micro_recall: Some(r),
            micro_f1: Some(f1),
            support: Some(support),
            accuracy: None,
            records,
        }
    }

    fn accuracy(task: &str, correct: usize, records: usize) -> Self {
        Self {
            task: task.to_string(),
            micro_precision: None,
            micro_recall: None,
            micro_f1: None,
            support: None,
            accuracy: Some(if records == 0 {
                1.0
            } else {
                correct as f64 / records as f64
            }),
            records,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub overall: TaskEval,
    /// Jaccard index of the surviving record sets, for consistency reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    pub token_matching: String,
}

fn token_bag(text: &str, spans: &[&Span]) -> HashMap<String, usize> {
    let mut bag = HashMap::new();
    if spans.is_empty() {
        return bag;
    }
    for t in tokenize(text).tokens {
        let covering = spans.iter().filter(|s| t.start < s.end && t.end > s.start).count();
        if covering > 0 {
            *bag.entry(t.surface.to_lowercase()).or_insert(0) += covering;
        }
    }
    bag
}

/// Token support for one record.
pub fn record_support(text: &str, pred: &[&Span], gold: &[&Span]) -> Support {
    let (p, g) = (token_bag(text, pred), token_bag(text, gold));
    Support {
        pred_tokens: p.values().sum(),
        gold_tokens: g.values().sum(),
        matched_tokens: p.iter().map(|(k, n)| (*n).min(g.get(k).copied().unwrap_or(0))).sum(),
    }
}

/// Micro-averaged word-level F1 of `pred` against `gold`.
pub fn word_f1(pred: &[SpanSet], gold: &[SpanSet], corpus: &Corpus) -> Result<EvalReport, EvalError> {
    let mut by_id: BTreeMap<&str, (Vec<&Span>, Vec<&Span>)> = BTreeMap::new();
    for s in pred {
        by_id.entry(&s.record_id).or_default().0.extend(&s.spans);
    }
    for s in gold {
        by_id.entry(&s.record_id).or_default().1.extend(&s.spans);
    }
    let mut total = Support::default();
    for (id, (p, g)) in &by_id {
        let record = corpus.get(id).ok_or_else(|| EvalError::UnknownRecord(id.to_string()))?;
        total.add(record_support(&record.text, p, g));
    }
    let task = TaskEval::spans("spans", total, by_id.len());
    Ok(EvalReport {
        tasks: vec![task.clone()],
        overall: TaskEval {
            task: "overall".into(),
            ..task
        },
        jaccard: None,
        token_matching: TOKEN_MATCHING.to_string(),
    })
}

/// Agreement of `run_a` with `run_b`, which is treated as gold.
///
/// Boolean fields are scored as accuracy over the union of surviving
/// records, with a missing row reading as `false`. The overall accuracy
/// counts a record as agreeing when it survives in both runs with equal
/// boolean fields. Span fields are scored by word F1 over the records that
/// survive in both runs.
pub fn consistency(run_a: &ResultSet, run_b: &ResultSet, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    if run_a.plan_id != run_b.plan_id {
        return Err(EvalError::PlanMismatch {
            a: run_a.plan_id.clone(),
            b: run_b.plan_id.clone(),
        });
    }
    let rows_a: BTreeMap<&str, _> = run_a.rows.iter().map(|r| (r.id.as_str(), &r.fields)).collect();
    let rows_b: BTreeMap<&str, _> = run_b.rows.iter().map(|r| (r.id.as_str(), &r.fields)).collect();
    for id in rows_a.keys().chain(rows_b.keys()) {
        if corpus.get(id).is_none() {
            return Err(EvalError::UnknownRecord(id.to_string()));
        }
    }
    let union: BTreeSet<&str> = rows_a.keys().chain(rows_b.keys()).copied().collect();
    let both: BTreeSet<&str> = rows_a.keys().filter(|k| rows_b.contains_key(*k)).copied().collect();

    let mut bool_fields = BTreeSet::new();
    let mut span_fields = BTreeSet::new();
    for fields in rows_a.values().chain(rows_b.values()) {
        for (name, v) in fields.iter() {
            match v {
                FieldValue::Bool(_) => bool_fields.insert(name.as_str()),
                FieldValue::Spans(_) => span_fields.insert(name.as_str()),
                FieldValue::Text(_) => false,
            };
        }
    }
    let flag = |rows: &BTreeMap<&str, &BTreeMap<String, FieldValue>>, id: &str, field: &str| {
        rows.get(id)
            .and_then(|f| f.get(field))
            .and_then(FieldValue::as_bool)
            .unwrap_or(false)
    };

    let mut tasks = Vec::new();
    for field in &bool_fields {
        let correct = union
            .iter()
            .filter(|id| flag(&rows_a, id, field) == flag(&rows_b, id, field))
            .count();
        tasks.push(TaskEval::accuracy(field, correct, union.len()));
    }
    let mut overall_support = Support::default();
    for field in &span_fields {
        let mut support = Support::default();
        for id in &both {
            let spans = |rows: &BTreeMap<&str, &BTreeMap<String, FieldValue>>| -> Vec<Span> {
                rows[id]
                    .get(*field)
                    .and_then(FieldValue::as_spans)
                    .map(<[Span]>::to_vec)
                    .unwrap_or_default()
            };
            let (p, g) = (spans(&rows_a), spans(&rows_b));
            let text = &corpus.get(id).expect("checked above").text;
            support.add(record_support(
                text,
                &p.iter().collect::<Vec<_>>(),
                &g.iter().collect::<Vec<_>>(),
            ));
        }
        overall_support.add(support);
        tasks.push(TaskEval::spans(field, support, both.len()));
    }

    let agreeing = union
        .iter()
        .filter(|id| both.contains(*id) && bool_fields.iter().all(|f| flag(&rows_a, id, f) == flag(&rows_b, id, f)))
        .count();
    let mut overall = TaskEval::accuracy("overall", agreeing, union.len());
    if !span_fields.is_empty() {
        let s = TaskEval::spans("overall", overall_support, both.len());
        overall.micro_precision = s.micro_precision;
        overall.micro_recall = s.micro_recall;
        overall.micro_f1 = s.micro_f1;
        overall.support = s.support;
    }
    let jaccard = if union.is_empty() {
        1.0
    } else {
        both.len() as f64 / union.len() as f64
    };
    Ok(EvalReport {
        tasks,
        overall,
        jaccard: Some(jaccard),
        token_matching: TOKEN_MATCHING.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// Three decimals, ties to even.
pub fn round3(x: f64) -> String {
    format!("{:.3}", (x * 1000.0).round_ties_even() / 1000.0)
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let v = serde_json::to_value(report).expect("report serializes");
            serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
        }
        ReportFormat::Markdown => {
            let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), round3);
            let count =
                |s: Option<Support>, f: fn(&Support) -> usize| s.map_or_else(|| "-".to_string(), |s| f(&s).to_string());
            let mut out = String::from(
                "| task | precision | recall | f1 | accuracy | gold tokens | pred tokens | matched | records |\n\
                 |---|---|---|---|---|---|---|---|---|\n",
            );
            for t in report.tasks.iter().chain(std::iter::once(&report.overall)) {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    t.task,
                    cell(t.micro_precision),
                    cell(t.micro_recall),
                    cell(t.micro_f1),
                    cell(t.accuracy),
                    count(t.support, |s| s.gold_tokens),
                    count(t.support, |s| s.pred_tokens),
                    count(t.support, |s| s.matched_tokens),
                    t.records,
                ));
            }
            if let Some(j) = report.jaccard {
                out.push_str(&format!("\nSurviving-set Jaccard: {}\n", round3(j)));
            }
            out.push_str(&format!("\nToken matching: {}\n", report.token_matching));
            out
        }
    }
}
