//! Plan IR: a typed DAG of primitive calls, boolean combinators, filters
//! and a single output sink.
//!
//! Plans are plain JSON (`plan-v1`). [`parse_plan`] only checks structure;
//! [`validate_plan`] collects every semantic violation; [`canonicalize`]
//! renames nodes so that equivalent pipelines serialize to identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PLAN_VERSION: &str = "plan-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("schema error at {path}: {reason}")]
    SchemaError { path: String, reason: String },
    #[error("plan is invalid: {0}")]
    InvalidPlan(ValidationReport),
    #[error("instruction must not be empty")]
    EmptyInstruction,
}

fn schema_err(path: impl Into<String>, reason: impl Into<String>) -> PlanError {
    PlanError::SchemaError {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Source,
    Label,
    Span,
    Bool,
    Filter,
    Output,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Source" => Self::Source,
            "Label" => Self::Label,
            "Span" => Self::Span,
            "Bool" => Self::Bool,
            "Filter" => Self::Filter,
            "Output" => Self::Output,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Source => "Source",
            Self::Label => "Label",
            Self::Span => "Span",
            Self::Bool => "Bool",
            Self::Filter => "Filter",
            Self::Output => "Output",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BoolOp {
    And,
    Or,
    Not,
}

impl BoolOp {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "And" => Self::And,
            "Or" => Self::Or,
            "Not" => Self::Not,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::And => "And",
            Self::Or => "Or",
            Self::Not => "Not",
        }
    }
}

/// A prompt template with `{slot}` placeholders bound to upstream Span nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub template: String,
    pub bindings: BTreeMap<String, String>,
}

impl InstructionTemplate {
    pub fn literal(text: impl Into<String>) -> Self {
        Self {
            template: text.into(),
            bindings: BTreeMap::new(),
        }
    }

    /// Placeholder names in order of appearance. `{{` and `}}` are escapes.
    pub fn slots(&self) -> Vec<String> {
        let mut slots = Vec::new();
        let mut chars = self.template.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                }
                '{' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    if !name.is_empty() && !slots.contains(&name) {
                        slots.push(name);
                    }
                }
                _ => {}
            }
        }
        slots
    }

    /// Substitutes slot values; unknown slots are left as written.
    pub fn render(&self, values: &BTreeMap<String, String>) -> String {
        let mut out = String::with_capacity(self.template.len());
        let mut chars = self.template.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    out.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    out.push('}');
                }
                '{' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    match values.get(&name) {
                        Some(v) => out.push_str(v),
                        None => {
                            out.push('{');
                            out.push_str(&name);
                            out.push('}');
                        }
                    }
                }
                c => out.push(c),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputField {
    pub name: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeOp {
    Source,
    Label {
        instruction: InstructionTemplate,
        input: String,
    },
    Span {
        instruction: InstructionTemplate,
        input: String,
    },
    Bool {
        op: BoolOp,
        inputs: Vec<String>,
    },
    Filter {
        predicate: String,
        input: String,
    },
    Output {
        fields: Vec<OutputField>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanNode {
    pub id: String,
    pub op: NodeOp,
}

impl PlanNode {
    pub fn new(id: impl Into<String>, op: NodeOp) -> Self {
        Self { id: id.into(), op }
    }

    pub fn kind(&self) -> NodeKind {
        match self.op {
            NodeOp::Source => NodeKind::Source,
            NodeOp::Label { .. } => NodeKind::Label,
            NodeOp::Span { .. } => NodeKind::Span,
            NodeOp::Bool { .. } => NodeKind::Bool,
            NodeOp::Filter { .. } => NodeKind::Filter,
            NodeOp::Output { .. } => NodeKind::Output,
        }
    }

    /// Every node id this node depends on, including slot bindings.
    pub fn dependencies(&self) -> Vec<&str> {
        match &self.op {
            NodeOp::Source => vec![],
            NodeOp::Label { instruction, input } | NodeOp::Span { instruction, input } => {
                let mut deps = vec![input.as_str()];
                deps.extend(instruction.bindings.values().map(String::as_str));
                deps
            }
            NodeOp::Bool { inputs, .. } => inputs.iter().map(String::as_str).collect(),
            NodeOp::Filter { predicate, input } => vec![predicate.as_str(), input.as_str()],
            NodeOp::Output { fields } => fields.iter().map(|f| f.node.as_str()).collect(),
        }
    }

    pub fn instruction(&self) -> Option<&InstructionTemplate> {
        match &self.op {
            NodeOp::Label { instruction, .. } | NodeOp::Span { instruction, .. } => Some(instruction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub version: String,
    pub nodes: Vec<PlanNode>,
    pub output: String,
    pub provenance: Option<String>,
}

impl Plan {
    pub fn node(&self, id: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Canonical JSON bytes of this plan as written (keys sorted, compact).
    pub fn to_json_string(&self) -> String {
        plan_to_value(self).to_string()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&plan_to_value(self)).expect("plan value serializes")
    }

    /// Hex SHA-256 of the canonical serialization; `InvalidPlan` if invalid.
    pub fn digest(&self) -> Result<String, PlanError> {
        let canon = canonicalize(self)?;
        Ok(hex::encode(Sha256::digest(canon.to_json_string().as_bytes())))
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn template_to_value(t: &InstructionTemplate) -> Value {
    let mut m = Map::new();
    m.insert("template".into(), Value::String(t.template.clone()));
    if !t.bindings.is_empty() {
        m.insert("bindings".into(), json!(t.bindings));
    }
    Value::Object(m)
}

fn node_to_value(n: &PlanNode) -> Value {
    let mut m = Map::new();
    m.insert("id".into(), Value::String(n.id.clone()));
    m.insert("kind".into(), Value::String(n.kind().as_str().into()));
    match &n.op {
        NodeOp::Source => {}
        NodeOp::Label { instruction, input } | NodeOp::Span { instruction, input } => {
            m.insert("instruction".into(), template_to_value(instruction));
            m.insert("input".into(), Value::String(input.clone()));
        }
        NodeOp::Bool { op, inputs } => {
            m.insert("op".into(), Value::String(op.as_str().into()));
            m.insert("inputs".into(), json!(inputs));
        }
        NodeOp::Filter { predicate, input } => {
            m.insert("predicate".into(), Value::String(predicate.clone()));
            m.insert("input".into(), Value::String(input.clone()));
        }
        NodeOp::Output { fields } => {
            let fields: Vec<Value> = fields.iter().map(|f| json!({"name": f.name, "node": f.node})).collect();
            m.insert("fields".into(), Value::Array(fields));
        }
    }
    Value::Object(m)
}

pub fn plan_to_value(plan: &Plan) -> Value {
    let mut m = Map::new();
    m.insert("version".into(), Value::String(plan.version.clone()));
    m.insert(
        "nodes".into(),
        Value::Array(plan.nodes.iter().map(node_to_value).collect()),
    );
    m.insert("output".into(), Value::String(plan.output.clone()));
    if let Some(p) = &plan.provenance {
        m.insert("provenance".into(), Value::String(p.clone()));
    }
    Value::Object(m)
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn req<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, PlanError> {
    obj.get(key)
        .ok_or_else(|| schema_err(format!("{path}/{key}"), "missing field"))
}

fn req_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, PlanError> {
    req(obj, key, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| schema_err(format!("{path}/{key}"), "expected string"))
}

fn str_list(v: &Value, path: &str) -> Result<Vec<String>, PlanError> {
    let arr = v.as_array().ok_or_else(|| schema_err(path, "expected array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_str()
                .map(str::to_string)
                .ok_or_else(|| schema_err(format!("{path}/{i}"), "expected string"))
        })
        .collect()
}

fn parse_template(v: &Value, path: &str) -> Result<InstructionTemplate, PlanError> {
    // a bare string is accepted as a template without bindings
    if let Some(s) = v.as_str() {
        return Ok(InstructionTemplate::literal(s));
    }
    let obj = v
        .as_object()
        .ok_or_else(|| schema_err(path, "expected object or string"))?;
    let template = req_str(obj, "template", path)?;
    let mut bindings = BTreeMap::new();
    if let Some(b) = obj.get("bindings") {
        let bpath = format!("{path}/bindings");
        let bobj = b.as_object().ok_or_else(|| schema_err(&bpath, "expected object"))?;
        for (k, v) in bobj {
            let id = v
                .as_str()
                .ok_or_else(|| schema_err(format!("{bpath}/{k}"), "expected string"))?;
            bindings.insert(k.clone(), id.to_string());
        }
    }
    Ok(InstructionTemplate { template, bindings })
}

fn parse_node(v: &Value, path: &str) -> Result<PlanNode, PlanError> {
    let obj = v.as_object().ok_or_else(|| schema_err(path, "expected object"))?;
    let id = req_str(obj, "id", path)?;
    let kind_str = req_str(obj, "kind", path)?;
    let kind = NodeKind::parse(&kind_str).ok_or_else(|| schema_err(format!("{path}/kind"), "unknown kind"))?;
    let op = match kind {
        NodeKind::Source => NodeOp::Source,
        NodeKind::Label | NodeKind::Span => {
            let instruction = parse_template(req(obj, "instruction", path)?, &format!("{path}/instruction"))?;
            let input = req_str(obj, "input", path)?;
            if kind == NodeKind::Label {
                NodeOp::Label { instruction, input }
            } else {
                NodeOp::Span { instruction, input }
            }
        }
        NodeKind::Bool => {
            let op_str = req_str(obj, "op", path)?;
            let op = BoolOp::parse(&op_str).ok_or_else(|| schema_err(format!("{path}/op"), "unknown boolean op"))?;
            let inputs = str_list(req(obj, "inputs", path)?, &format!("{path}/inputs"))?;
            NodeOp::Bool { op, inputs }
        }
        NodeKind::Filter => NodeOp::Filter {
            predicate: req_str(obj, "predicate", path)?,
            input: req_str(obj, "input", path)?,
        },
        NodeKind::Output => {
            let fpath = format!("{path}/fields");
            let arr = req(obj, "fields", path)?
                .as_array()
                .ok_or_else(|| schema_err(&fpath, "expected array"))?;
            let fields = arr
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let p = format!("{fpath}/{i}");
                    let fo = f.as_object().ok_or_else(|| schema_err(&p, "expected object"))?;
                    Ok(OutputField {
                        name: req_str(fo, "name", &p)?,
                        node: req_str(fo, "node", &p)?,
                    })
                })
                .collect::<Result<_, PlanError>>()?;
            NodeOp::Output { fields }
        }
    };
    Ok(PlanNode { id, op })
}

/// Structural parse of a `plan-v1` document.
pub fn parse_plan(document: &str) -> Result<Plan, PlanError> {
    let value: Value = serde_json::from_str(document).map_err(|e| schema_err("", format!("invalid JSON: {e}")))?;
    plan_from_value(&value)
}

pub fn plan_from_value(value: &Value) -> Result<Plan, PlanError> {
    let obj = value.as_object().ok_or_else(|| schema_err("", "expected object"))?;
    let version = req_str(obj, "version", "")?;
    if version != PLAN_VERSION {
        return Err(schema_err("/version", format!("unsupported version {version:?}")));
    }
    let nodes_v = req(obj, "nodes", "")?
        .as_array()
        .ok_or_else(|| schema_err("/nodes", "expected array"))?;
    let nodes = nodes_v
        .iter()
        .enumerate()
        .map(|(i, n)| parse_node(n, &format!("/nodes/{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let output = req_str(obj, "output", "")?;
    let provenance = match obj.get("provenance") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        // structured provenance is kept as its compact JSON text
        Some(other) => Some(other.to_string()),
    };
    Ok(Plan {
        version,
        nodes,
        output,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// The value a node yields per record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Records,
    Boolean,
    Spanset,
    Sink,
}

impl ValueType {
    pub fn of(kind: NodeKind) -> Self {
        match kind {
            NodeKind::Source | NodeKind::Filter => Self::Records,
            NodeKind::Label | NodeKind::Bool => Self::Boolean,
            NodeKind::Span => Self::Spanset,
            NodeKind::Output => Self::Sink,
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Records => "records",
            Self::Boolean => "boolean",
            Self::Spanset => "spanset",
            Self::Sink => "sink",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Violation {
    DuplicateId {
        id: String,
    },
    DanglingRef {
        node: String,
        target: String,
    },
    Cycle {
        nodes: Vec<String>,
    },
    TypeMismatch {
        node: String,
        expected: ValueType,
        found: ValueType,
    },
    BadArity {
        node: String,
        op: BoolOp,
        found: usize,
    },
    UnboundSlot {
        node: String,
        slot: String,
    },
    SlotNotSpan {
        node: String,
        slot: String,
        target: String,
    },
    SourceCount {
        found: usize,
    },
    OutputCount {
        found: usize,
    },
    OutputMismatch {
        declared: String,
    },
    DuplicateField {
        node: String,
        name: String,
    },
    EmptyOutput {
        node: String,
    },
    EmptyInstruction {
        node: String,
    },
    UnsupportedVersion {
        version: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateId { id } => write!(f, "duplicate node id {id:?}"),
            Self::DanglingRef { node, target } => write!(f, "node {node:?} references missing node {target:?}"),
            Self::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(" -> ")),
            Self::TypeMismatch { node, expected, found } => {
                write!(f, "node {node:?} expected a {expected} input, found {found}")
            }
            Self::BadArity { node, op, found } => {
                write!(f, "{} node {node:?} has {found} inputs", op.as_str())
            }
            Self::UnboundSlot { node, slot } => write!(f, "node {node:?} has unbound slot {{{slot}}}"),
            Self::SlotNotSpan { node, slot, target } => {
                write!(f, "node {node:?} binds slot {{{slot}}} to non-Span node {target:?}")
            }
            Self::SourceCount { found } => write!(f, "plan needs exactly one Source, found {found}"),
            Self::OutputCount { found } => write!(f, "plan needs exactly one Output, found {found}"),
            Self::OutputMismatch { declared } => write!(f, "declared output {declared:?} is not the Output node"),
            Self::DuplicateField { node, name } => write!(f, "output {node:?} repeats field {name:?}"),
            Self::EmptyOutput { node } => write!(f, "output {node:?} has no fields"),
            Self::EmptyInstruction { node } => write!(f, "node {node:?} has an empty instruction"),
            Self::UnsupportedVersion { version } => write!(f, "unsupported plan version {version:?}"),
        }
    }
}

/// All violations found in a plan; empty means executable.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("no violations");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

pub fn validate_plan(plan: &Plan) -> ValidationReport {
    let mut out = Vec::new();
    if plan.version != PLAN_VERSION {
        out.push(Violation::UnsupportedVersion {
            version: plan.version.clone(),
        });
    }

    let mut by_id: HashMap<&str, &PlanNode> = HashMap::new();
    for n in &plan.nodes {
        if by_id.insert(n.id.as_str(), n).is_some() {
            out.push(Violation::DuplicateId { id: n.id.clone() });
        }
    }

    let count = |k: NodeKind| plan.nodes.iter().filter(|n| n.kind() == k).count();
    let sources = count(NodeKind::Source);
    if sources != 1 {
        out.push(Violation::SourceCount { found: sources });
    }
    let outputs = count(NodeKind::Output);
    if outputs != 1 {
        out.push(Violation::OutputCount { found: outputs });
    }
    if by_id.get(plan.output.as_str()).map(|n| n.kind()) != Some(NodeKind::Output) {
        out.push(Violation::OutputMismatch {
            declared: plan.output.clone(),
        });
    }

    for n in &plan.nodes {
        check_node(n, &by_id, &mut out);
    }

    if let Some(cycle) = find_cycle(plan, &by_id) {
        out.push(Violation::Cycle { nodes: cycle });
    }
    ValidationReport { violations: out }
}

fn check_node(n: &PlanNode, by_id: &HashMap<&str, &PlanNode>, out: &mut Vec<Violation>) {
    let expect = |target: &str, expected: &[ValueType], out: &mut Vec<Violation>| match by_id.get(target) {
        None => out.push(Violation::DanglingRef {
            node: n.id.clone(),
            target: target.to_string(),
        }),
        Some(t) => {
            let found = ValueType::of(t.kind());
            if !expected.contains(&found) {
                out.push(Violation::TypeMismatch {
                    node: n.id.clone(),
                    expected: expected[0],
                    found,
                });
            }
        }
    };
    match &n.op {
        NodeOp::Source => {}
        NodeOp::Label { instruction, input } | NodeOp::Span { instruction, input } => {
            expect(input, &[ValueType::Records], out);
            if instruction.template.trim().is_empty() {
                out.push(Violation::EmptyInstruction { node: n.id.clone() });
            }
            for slot in instruction.slots() {
                match instruction.bindings.get(&slot) {
                    None => out.push(Violation::UnboundSlot {
                        node: n.id.clone(),
                        slot,
                    }),
                    Some(target) => match by_id.get(target.as_str()) {
                        None => out.push(Violation::DanglingRef {
                            node: n.id.clone(),
                            target: target.clone(),
                        }),
                        Some(t) if t.kind() != NodeKind::Span => out.push(Violation::SlotNotSpan {
                            node: n.id.clone(),
                            slot,
                            target: target.clone(),
                        }),
                        Some(_) => {}
                    },
                }
            }
            for (slot, target) in &instruction.bindings {
                if !by_id.contains_key(target.as_str()) && !instruction.slots().contains(slot) {
                    out.push(Violation::DanglingRef {
                        node: n.id.clone(),
                        target: target.clone(),
                    });
                }
            }
        }
        NodeOp::Bool { op, inputs } => {
            let arity_ok = match op {
                BoolOp::Not => inputs.len() == 1,
                BoolOp::And | BoolOp::Or => inputs.len() >= 2,
            };
            if !arity_ok {
                out.push(Violation::BadArity {
                    node: n.id.clone(),
                    op: *op,
                    found: inputs.len(),
                });
            }
            for i in inputs {
                expect(i, &[ValueType::Boolean], out);
            }
        }
        NodeOp::Filter { predicate, input } => {
            expect(predicate, &[ValueType::Boolean], out);
            expect(input, &[ValueType::Records], out);
        }
        NodeOp::Output { fields } => {
            if fields.is_empty() {
                out.push(Violation::EmptyOutput { node: n.id.clone() });
            }
            let mut names = BTreeSet::new();
            for f in fields {
                if !names.insert(f.name.as_str()) {
                    out.push(Violation::DuplicateField {
                        node: n.id.clone(),
                        name: f.name.clone(),
                    });
                }
                expect(
                    &f.node,
                    &[ValueType::Records, ValueType::Boolean, ValueType::Spanset],
                    out,
                );
            }
        }
    }
}

/// First cycle found by DFS in node order, as the ids along the cycle.
fn find_cycle(plan: &Plan, by_id: &HashMap<&str, &PlanNode>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit<'a>(
        id: &'a str,
        by_id: &HashMap<&'a str, &'a PlanNode>,
        marks: &mut HashMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(id, Mark::Active);
        stack.push(id);
        let node = by_id[id];
        for dep in node.dependencies() {
            let Some((&dep_id, _)) = by_id.get_key_value(dep) else {
                continue;
            };
            match marks.get(dep_id).copied().unwrap_or(Mark::New) {
                Mark::Active => {
                    let pos = stack
                        .iter()
                        .position(|s| *s == dep_id)
                        .expect("active node is on stack");
                    return Some(stack[pos..].iter().map(|s| s.to_string()).collect());
                }
                Mark::New => {
                    if let Some(c) = visit(dep_id, by_id, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(id, Mark::Done);
        None
    }

    let mut marks: HashMap<&str, Mark> = HashMap::new();
    for n in &plan.nodes {
        let id = n.id.as_str();
        if marks.get(id).copied().unwrap_or(Mark::New) == Mark::New {
            let mut stack = Vec::new();
            if let Some(mut cycle) = visit(id, by_id, &mut marks, &mut stack) {
                // report in dependency direction, starting from the earliest-declared member
                cycle.reverse();
                let order: HashMap<&str, usize> =
                    plan.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
                let first = (0..cycle.len()).min_by_key(|&i| order[cycle[i].as_str()]).unwrap_or(0);
                cycle.rotate_left(first);
                return Some(cycle);
            }
        }
    }
    None
}

/// Topological order of node indices (dependencies first), stable by
/// declaration order. Requires an acyclic plan with unique ids.
pub fn topological_order(plan: &Plan) -> Result<Vec<usize>, PlanError> {
    let report = validate_plan(plan);
    if !report.is_valid() {
        return Err(PlanError::InvalidPlan(report));
    }
    Ok(kahn(plan, |ready, _| {
        ready.iter().copied().min().expect("non-empty ready set")
    }))
}

/// Kahn's algorithm; `pick` chooses the next node among the ready set given
/// the order emitted so far.
fn kahn(plan: &Plan, mut pick: impl FnMut(&BTreeSet<usize>, &[usize]) -> usize) -> Vec<usize> {
    let index: HashMap<&str, usize> = plan.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut indegree = vec![0usize; plan.nodes.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); plan.nodes.len()];
    for (i, n) in plan.nodes.iter().enumerate() {
        let deps: BTreeSet<usize> = n.dependencies().into_iter().map(|d| index[d]).collect();
        indegree[i] = deps.len();
        for d in deps {
            dependents[d].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..plan.nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(plan.nodes.len());
    while !ready.is_empty() {
        let next = pick(&ready, &order);
        ready.remove(&next);
        order.push(next);
        for &d in &dependents[next] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.insert(d);
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

fn rename_op(op: &NodeOp, names: &HashMap<&str, String>) -> NodeOp {
    let r = |id: &String| names.get(id.as_str()).cloned().unwrap_or_else(|| id.clone());
    let rt = |t: &InstructionTemplate| InstructionTemplate {
        template: t.template.clone(),
        bindings: t.bindings.iter().map(|(k, v)| (k.clone(), r(v))).collect(),
    };
    match op {
        NodeOp::Source => NodeOp::Source,
        NodeOp::Label { instruction, input } => NodeOp::Label {
            instruction: rt(instruction),
            input: r(input),
        },
        NodeOp::Span { instruction, input } => NodeOp::Span {
            instruction: rt(instruction),
            input: r(input),
        },
        NodeOp::Bool { op, inputs } => {
            let mut inputs: Vec<String> = inputs.iter().map(r).collect();
            if matches!(op, BoolOp::And | BoolOp::Or) {
                inputs.sort();
            }
            NodeOp::Bool { op: *op, inputs }
        }
        NodeOp::Filter { predicate, input } => NodeOp::Filter {
            predicate: r(predicate),
            input: r(input),
        },
        NodeOp::Output { fields } => {
            let mut fields: Vec<OutputField> = fields
                .iter()
                .map(|f| OutputField {
                    name: f.name.clone(),
                    node: r(&f.node),
                })
                .collect();
            fields.sort_by(|a, b| a.name.cmp(&b.name));
            NodeOp::Output { fields }
        }
    }
}

/// Payload serialization with the id removed, used as a tie-breaker.
fn payload_key(op: &NodeOp) -> String {
    let mut v = node_to_value(&PlanNode::new("", op.clone()));
    if let Value::Object(m) = &mut v {
        m.remove("id");
    }
    v.to_string()
}

fn digest_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Name-independent signature of how each node is consumed downstream.
///
/// Two ready nodes with equal payloads can still feed different consumers.
/// Breaking that tie by file position would make the canonical form depend on
/// node order, so the downstream shape is compared first.
fn context_signatures(plan: &Plan) -> Vec<String> {
    let order = kahn(plan, |ready, _| *ready.iter().next().expect("non-empty ready set"));
    let mut down: Vec<String> = vec![String::new(); plan.nodes.len()];
    let mut by_id: HashMap<&str, String> = HashMap::new();
    for &i in &order {
        let n = &plan.nodes[i];
        down[i] = digest_hex(&format!("{:?}|{}", n.kind(), payload_key(&rename_op(&n.op, &by_id))));
        by_id.insert(n.id.as_str(), down[i].clone());
    }
    let mut up: Vec<String> = vec![String::new(); plan.nodes.len()];
    for &i in order.iter().rev() {
        let me = plan.nodes[i].id.as_str();
        let mut uses: Vec<String> = plan
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.dependencies().contains(&me))
            .map(|(c, consumer)| {
                let mut view = by_id.clone();
                view.insert(me, "@".into());
                format!("{}|{}", payload_key(&rename_op(&consumer.op, &view)), up[c])
            })
            .collect();
        uses.sort();
        let root = if plan.output == me { "root" } else { "" };
        up[i] = digest_hex(&format!("{root}[{}]", uses.join(",")));
    }
    up
}

/// Renames nodes `n0..nk` in topological order (ties by kind, then payload)
/// and sorts commutative inputs and output fields. Provenance is dropped.
pub fn canonicalize(plan: &Plan) -> Result<Plan, PlanError> {
    let report = validate_plan(plan);
    if !report.is_valid() {
        return Err(PlanError::InvalidPlan(report));
    }
    let context = context_signatures(plan);
    let mut names: HashMap<&str, String> = HashMap::new();
    let mut renamed: Vec<PlanNode> = Vec::with_capacity(plan.nodes.len());
    let order = kahn(plan, |ready, _| {
        // every dependency of a ready node is already named, so its payload key is final
        let choice = ready
            .iter()
            .copied()
            .min_by_key(|&i| {
                let n = &plan.nodes[i];
                (n.kind(), payload_key(&rename_op(&n.op, &names)), &context[i], i)
            })
            .expect("non-empty ready set");
        let name = format!("n{}", names.len());
        names.insert(plan.nodes[choice].id.as_str(), name.clone());
        renamed.push(PlanNode::new(name, rename_op(&plan.nodes[choice].op, &names)));
        choice
    });
    debug_assert_eq!(order.len(), plan.nodes.len());
    Ok(Plan {
        version: PLAN_VERSION.to_string(),
        output: names[plan.output.as_str()].clone(),
        nodes: renamed,
        provenance: None,
    })
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// The two-stage classify-then-extract pipeline:
/// Source -> Label -> Filter -> Span -> Output(text, spans).
pub fn make_filter_extract(label_instruction: &str, span_instruction: &str) -> Result<Plan, PlanError> {
    if label_instruction.trim().is_empty() || span_instruction.trim().is_empty() {
        return Err(PlanError::EmptyInstruction);
    }
    Ok(Plan {
        version: PLAN_VERSION.to_string(),
        nodes: vec![
            PlanNode::new("source", NodeOp::Source),
            PlanNode::new(
                "label",
                NodeOp::Label {
                    instruction: InstructionTemplate::literal(label_instruction),
                    input: "source".into(),
                },
            ),
            PlanNode::new(
                "filter",
                NodeOp::Filter {
                    predicate: "label".into(),
                    input: "source".into(),
                },
            ),
            PlanNode::new(
                "span",
                NodeOp::Span {
                    instruction: InstructionTemplate::literal(span_instruction),
                    input: "filter".into(),
                },
            ),
            PlanNode::new(
                "output",
                NodeOp::Output {
                    fields: vec![
                        OutputField {
                            name: "text".into(),
                            node: "filter".into(),
                        },
                        OutputField {
                            name: "spans".into(),
                            node: "span".into(),
                        },
                    ],
                },
            ),
        ],
        output: "output".into(),
        provenance: None,
    })
}
