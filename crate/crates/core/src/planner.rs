//! Turning a natural-language task into a plan with a chat model, and
//! judging planners by executing their plans against golden ones.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{extract_json_object, BackendError, ChatClient, ChatMessage, Dispatcher, MockBackend};
use crate::corpus::Corpus;
use crate::executor::{execute, Bindings, ExecError, ExecOptions};
use crate::plan::{canonicalize, plan_from_value, plan_to_value, validate_plan, Plan, PLAN_VERSION};

pub const DEFAULT_REPAIR_ROUNDS: usize = 2;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("task must not be empty")]
    EmptyTask,
    #[error("example {index} ({task:?}) is not a valid plan: {detail}")]
    InvalidExample { index: usize, task: String, detail: String },
    #[error("planner reply contains no JSON object")]
    NoJsonFound,
    #[error("plan still invalid after {rounds} repair round(s): {detail}")]
    PlanInvalidAfterRepairs { rounds: usize, detail: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no golden plan for task {0:?}")]
    MissingGolden(String),
    #[error("golden plan for {task:?} failed to execute: {source}")]
    GoldenFailed {
        task: String,
        #[source]
        source: ExecError,
    },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclExample {
    pub task: String,
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerRequest {
    pub task: String,
    pub icl_examples: Vec<IclExample>,
    pub model: String,
}

impl PlannerRequest {
    pub fn new(task: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            icl_examples: Vec::new(),
            model: model.into(),
        }
    }
}

const SCHEMA: &str = r#"{
  "version": "plan-v1",
  "nodes": [<node>, ...],
  "output": "<id of the Output node>"
}
<node> is one of:
  {"id": "<id>", "kind": "Source"}
  {"id": "<id>", "kind": "Label", "instruction": <instruction>, "input": "<records node>"}
  {"id": "<id>", "kind": "Span", "instruction": <instruction>, "input": "<records node>"}
  {"id": "<id>", "kind": "Bool", "op": "And" | "Or" | "Not", "inputs": ["<boolean node>", ...]}
  {"id": "<id>", "kind": "Filter", "predicate": "<boolean node>", "input": "<records node>"}
  {"id": "<id>", "kind": "Output", "fields": [{"name": "<field>", "node": "<id>"}, ...]}
<instruction> is a string, or {"template": "... {slot} ...", "bindings": {"slot": "<Span node>"}}
  where each slot is filled with the first span the bound node found in the same record.
Records nodes are Source and Filter. Label and Bool nodes are boolean. Span nodes yield spans.
And/Or take two or more inputs, Not takes exactly one. Exactly one Source and one Output.
The graph must be acyclic."#;

const SIGNATURES: &str = "get_label(text, instruction) -> yes | no      (a Label node)\n\
                          get_span(text, instruction) -> list of spans  (a Span node)";

const SYSTEM: &str = "You translate information-extraction requests into executable plans. \
                      Reply with exactly one JSON object.";

/// The user prompt for `request`: schema, primitive signatures, the task
/// verbatim, then each worked example with its canonical plan.
pub fn build_planner_prompt(request: &PlannerRequest) -> Result<String, PlannerError> {
    if request.task.trim().is_empty() {
        return Err(PlannerError::EmptyTask);
    }
    let mut out = String::new();
    let _ = writeln!(out, "Write a {PLAN_VERSION} plan for the task below.\n");
    let _ = writeln!(out, "Plan schema:\n{SCHEMA}\n");
    let _ = writeln!(out, "Primitives:\n{SIGNATURES}\n");
    let _ = writeln!(out, "Task: {}", request.task);
    if !request.icl_examples.is_empty() {
        let _ = writeln!(out, "\nExamples:");
        for (index, ex) in request.icl_examples.iter().enumerate() {
            let canon = canonicalize(&ex.plan).map_err(|e| PlannerError::InvalidExample {
                index,
                task: ex.task.clone(),
                detail: e.to_string(),
            })?;
            let _ = writeln!(out, "\nTask: {}\nPlan: {}", ex.task, canon.to_json_string());
        }
    }
    let _ = write!(out, "\nReply with the plan for the task as a single JSON object.");
    Ok(out)
}

enum Rejection {
    NoJson,
    Invalid(String),
}

fn check_reply(reply: &str) -> Result<Plan, Rejection> {
    let value = extract_json_object(reply).ok_or(Rejection::NoJson)?;
    let plan = plan_from_value(&value).map_err(|e| Rejection::Invalid(e.to_string()))?;
    let report = validate_plan(&plan);
    if report.is_valid() {
        Ok(plan)
    } else {
        Err(Rejection::Invalid(report.to_string()))
    }
}

/// Parses and validates a reply without any repair round.
pub fn parse_planner_response(reply: &str) -> Result<Plan, PlannerError> {
    check_reply(reply).map_err(|r| match r {
        Rejection::NoJson => PlannerError::NoJsonFound,
        Rejection::Invalid(detail) => PlannerError::PlanInvalidAfterRepairs { rounds: 0, detail },
    })
}

/// Asks `client` for a plan, feeding validation problems back for at most
/// `repairs` extra rounds.
pub fn request_plan(client: &dyn ChatClient, request: &PlannerRequest, repairs: usize) -> Result<Plan, PlannerError> {
    let mut messages = vec![
        ChatMessage::system(SYSTEM),
        ChatMessage::user(build_planner_prompt(request)?),
    ];
    for round in 0..=repairs {
        let reply = client.complete(&messages)?;
        let problem = match check_reply(&reply) {
            Ok(mut plan) => {
                plan.provenance = Some(format!("planner {}; task: {}", client.model(), request.task));
                return Ok(plan);
            }
            Err(Rejection::NoJson) if round == repairs => return Err(PlannerError::NoJsonFound),
            Err(Rejection::Invalid(detail)) if round == repairs => {
                return Err(PlannerError::PlanInvalidAfterRepairs {
                    rounds: repairs,
                    detail,
                })
            }
            Err(Rejection::NoJson) => "the reply did not contain a JSON object".to_string(),
            Err(Rejection::Invalid(detail)) => detail,
        };
        log::info!("planner repair round {}: {problem}", round + 1);
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(format!(
            "That plan is not valid: {problem}\nReply with a corrected plan as a single JSON object."
        )));
    }
    unreachable!("the last round always returns")
}

/// A candidate plan for a task, or the reason the planner produced none.
pub type Candidate = (String, Result<Plan, String>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningScore {
    pub total: usize,
    pub correct: usize,
    pub score: f64,
    /// (task, failure kind) for every incorrect candidate, in input order.
    pub failures: Vec<(String, String)>,
}

/// Fraction of candidates that validate and behave exactly like their
/// golden plan on `probe` under the same mock backend.
pub fn score_planning(
    candidates: &[Candidate],
    golden: &BTreeMap<String, Plan>,
    probe: &Corpus,
    backend: Arc<MockBackend>,
) -> Result<PlanningScore, PlannerError> {
    if let Some((task, _)) = candidates.iter().find(|(t, _)| !golden.contains_key(t)) {
        return Err(PlannerError::MissingGolden(task.clone()));
    }
    let dispatcher = Arc::new(Dispatcher::new(backend)?);
    let bindings = Bindings::both(dispatcher);
    let opts = ExecOptions {
        cache: false,
        ..ExecOptions::default()
    };
    let mut expected = BTreeMap::new();
    let mut failures = Vec::new();
    for (task, candidate) in candidates {
        let plan = match candidate {
            Err(reason) => {
                failures.push((task.clone(), format!("no plan: {reason}")));
                continue;
            }
            Ok(plan) => plan,
        };
        let report = validate_plan(plan);
        if !report.is_valid() {
            failures.push((task.clone(), format!("invalid: {report}")));
            continue;
        }
        if !expected.contains_key(task) {
            let (rows, _) =
                execute(&golden[task], probe, &bindings, &opts).map_err(|source| PlannerError::GoldenFailed {
                    task: task.clone(),
                    source,
                })?;
            expected.insert(task.clone(), rows.rows);
        }
        match execute(plan, probe, &bindings, &opts) {
            Ok((rows, _)) if rows.rows == expected[task] => {}
            Ok(_) => failures.push((task.clone(), "behavior differs from golden".into())),
            Err(e) => failures.push((task.clone(), format!("execution failed: {e}"))),
        }
    }
    let total = candidates.len();
    let correct = total - failures.len();
    Ok(PlanningScore {
        total,
        correct,
        score: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        failures,
    })
}

/// On-disk pairing of a task with a plan, or with the planner's failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlanFile {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskPlanFile {
    pub fn from_plan(task: &str, plan: &Plan) -> Self {
        Self {
            task: task.to_string(),
            plan: Some(plan_to_value(plan)),
            error: None,
        }
    }

    /// The plan, or a description of why there is none.
    pub fn candidate(&self) -> Result<Plan, String> {
        match (&self.plan, &self.error) {
            (Some(v), _) => plan_from_value(v).map_err(|e| e.to_string()),
            (None, Some(e)) => Err(e.clone()),
            (None, None) => Err("no plan recorded".into()),
        }
    }
}

/// Reads every `*.json` file in `dir` (sorted by file name).
pub fn load_task_plans(dir: &Path) -> Result<Vec<TaskPlanFile>, PlannerError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| PlannerError::Io {
        path: p.display().to_string(),
        detail: e.to_string(),
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io(dir, &e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = fs::read_to_string(p).map_err(|e| io(p, &e))?;
            serde_json::from_str(&raw).map_err(|e| io(p, &e))
        })
        .collect()
}

/// Loads worked examples for the planner prompt; every plan must be valid.
pub fn load_icl_examples(dir: &Path) -> Result<Vec<IclExample>, PlannerError> {
    load_task_plans(dir)?
        .into_iter()
        .enumerate()
        .map(|(index, f)| {
            let plan = f.candidate().map_err(|detail| PlannerError::InvalidExample {
                index,
                task: f.task.clone(),
                detail,
            })?;
            Ok(IclExample { task: f.task, plan })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;

    #[test]
    fn prompt_without_examples_has_no_example_section() {
        let p = build_planner_prompt(&PlannerRequest::new("Extract all locations mentioned", "m")).unwrap();
        assert!(p.contains("\"version\": \"plan-v1\""));
        assert!(p.contains("get_label(text, instruction)"));
        assert!(p.contains("get_span(text, instruction)"));
        assert!(p.contains("\nTask: Extract all locations mentioned\n"));
        assert!(!p.contains("Examples:"));
    }

    #[test]
    fn prompt_embeds_canonical_examples_in_order() {
        let mut req = PlannerRequest::new("t", "m");
        let second = crate::plan::make_filter_extract("brain", "Extract the lecturer").unwrap();
        req.icl_examples = vec![
            IclExample {
                task: "first".into(),
                plan: testkit::f1_plan(),
            },
            IclExample {
                task: "second".into(),
                plan: second.clone(),
            },
        ];
        let p = build_planner_prompt(&req).unwrap();
        let a = canonicalize(&testkit::f1_plan()).unwrap().to_json_string();
        let b = canonicalize(&second).unwrap().to_json_string();
        let (ia, ib) = (p.find(&a).unwrap(), p.find(&b).unwrap());
        assert!(ia < ib);
        assert_eq!(p, build_planner_prompt(&req).unwrap());
    }

    #[test]
    fn replies_parse_or_fail_cleanly() {
        let fenced = format!("```json\n{}\n```", testkit::F1_PLAN);
        assert_eq!(parse_planner_response(&fenced).unwrap(), testkit::f1_plan());
        assert!(matches!(
            parse_planner_response("I cannot help"),
            Err(PlannerError::NoJsonFound)
        ));
        let cyclic = r#"{"version":"plan-v1","nodes":[
            {"id":"s","kind":"Source"},
            {"id":"a","kind":"Bool","op":"Not","inputs":["b"]},
            {"id":"b","kind":"Bool","op":"Not","inputs":["a"]},
            {"id":"o","kind":"Output","fields":[{"name":"x","node":"a"}]}],"output":"o"}"#;
        assert!(matches!(
            parse_planner_response(cyclic),
            Err(PlannerError::PlanInvalidAfterRepairs { rounds: 0, .. })
        ));
    }
}
