//! Fixtures shared by unit, integration and acceptance tests, plus a tiny
//! HTTP server for exercising the wire clients offline.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::Rng;
use serde_json::{json, Value};

use crate::backends::{MockBackend, MockRules};
use crate::corpus::{Corpus, CorpusRecord};
use crate::plan::{parse_plan, BoolOp, InstructionTemplate, NodeOp, OutputField, Plan, PlanNode, PLAN_VERSION};

/// Classify finance talks, keep them, extract their lecturer.
pub const F1_PLAN: &str = r#"{
  "version": "plan-v1",
  "nodes": [
    {"id": "corpus", "kind": "Source"},
    {"id": "is_finance", "kind": "Label", "instruction": "finance", "input": "corpus"},
    {"id": "finance_texts", "kind": "Filter", "predicate": "is_finance", "input": "corpus"},
    {"id": "lecturer", "kind": "Span", "instruction": "Extract the lecturer of the speak in the given text.", "input": "finance_texts"},
    {"id": "out", "kind": "Output", "fields": [{"name": "text", "node": "finance_texts"}, {"name": "spans", "node": "lecturer"}]}
  ],
  "output": "out"
}"#;

/// Talks about both health and the brain, with their lecturer.
pub const HEALTH_BRAIN_PLAN: &str = r#"{
  "version": "plan-v1",
  "nodes": [
    {"id": "corpus", "kind": "Source"},
    {"id": "health", "kind": "Label", "instruction": "health", "input": "corpus"},
    {"id": "brain", "kind": "Label", "instruction": "brain", "input": "corpus"},
    {"id": "both", "kind": "Bool", "op": "And", "inputs": ["health", "brain"]},
    {"id": "kept", "kind": "Filter", "predicate": "both", "input": "corpus"},
    {"id": "lecturer", "kind": "Span", "instruction": "Extract the lecturer of the speak in the given text.", "input": "kept"},
    {"id": "out", "kind": "Output", "fields": [{"name": "text", "node": "kept"}, {"name": "spans", "node": "lecturer"}]}
  ],
  "output": "out"
}"#;

pub const MOCK_RULES: &str = r#"{
  "classify": [
    {"instruction_contains": "finance", "keywords": ["finance", "market", "stocks", "investing"]},
    {"instruction_contains": "health", "keywords": ["health", "medicine", "disease"]},
    {"instruction_contains": "brain", "keywords": ["brain", "neuroscience", "memory"]}
  ],
  "extract": [
    {"instruction_contains": "lecturer", "patterns": [
      "Ada Lovelace", "Grace Hopper", "Alan Turing", "Emmy Noether", "John Nash",
      "Marie Curie", "Carl Sagan", "Rosalind Franklin", "Oliver Sacks", "Ruth Okafor"
    ]},
    {"instruction_contains": "price", "patterns": ["$<digits>"]},
    {"instruction_contains": "location", "patterns": ["Paris", "Lagos", "Kyoto", "Lima"]}
  ]
}"#;

/// 20 talk blurbs; exactly 7 mention a finance keyword, each with a known lecturer.
pub const TED_TEXTS: [&str; 20] = [
    "Ada Lovelace explains how the stock market reacts to rumors.",
    "A gentle tour of coral reefs and the fish that live there.",
    "Grace Hopper on why personal finance is a habit, not a formula.",
    "Oliver Sacks describes how the brain rebuilds memory after injury.",
    "Cooking with seasonal vegetables in a small apartment kitchen.",
    "Alan Turing argues that investing early beats investing big.",
    "Marie Curie talks about public health lessons from old epidemics.",
    "Emmy Noether on the hidden math of market crashes.",
    "Why we dream: a neuroscience view of sleep and the brain.",
    "John Nash shows how game theory shapes finance and diplomacy.",
    "Carl Sagan imagines cities on Mars and the people who build them.",
    "Rosalind Franklin on brain health and the disease we ignore.",
    "Street photography in Lagos after dark.",
    "Ruth Okafor explains how stocks, bonds and savings fit together.",
    "The surprising history of the bicycle.",
    "Carl Sagan on building habits that keep your brain sharp and protect health.",
    "A violinist plays Bach and talks about practice.",
    "Marie Curie tells how a village beat disease with clean water.",
    "Learning a language after forty.",
    "Grace Hopper on the market for ideas and why finance needs stories.",
];

pub const TED_FINANCE_IDS: [&str; 7] = ["ted-01", "ted-03", "ted-06", "ted-08", "ted-10", "ted-14", "ted-20"];

pub fn f1_plan() -> Plan {
    parse_plan(F1_PLAN).expect("F1 fixture parses")
}

pub fn health_brain_plan() -> Plan {
    parse_plan(HEALTH_BRAIN_PLAN).expect("fixture parses")
}

pub fn mock_rules() -> MockRules {
    MockRules::from_json(MOCK_RULES).expect("fixture rules parse")
}

pub fn mock_backend() -> MockBackend {
    MockBackend::new(mock_rules()).expect("fixture backend")
}

pub fn ted_corpus() -> Corpus {
    let records = TED_TEXTS
        .iter()
        .enumerate()
        .map(|(i, t)| CorpusRecord::new(format!("ted-{:02}", i + 1), *t))
        .collect();
    Corpus::new(records, "ted-fixture").expect("fixture corpus")
}

/// Mock rules giving each `(label, text -> score)` table its own classify rule.
pub fn scored_rules(tables: &[(String, BTreeMap<String, f64>)]) -> MockRules {
    let classify: Vec<Value> = tables
        .iter()
        .map(|(label, scores)| json!({"instruction_contains": label, "keywords": [], "scores": scores}))
        .collect();
    MockRules::from_json(&json!({"classify": classify, "extract": []}).to_string()).expect("generated rules parse")
}

/// A boolean formula over label indices, used as an executor oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoolTree {
    Leaf(usize),
    Not(Box<BoolTree>),
    And(Vec<BoolTree>),
    Or(Vec<BoolTree>),
}

impl BoolTree {
    /// Direct truth-table evaluation.
    pub fn eval(&self, labels: &[bool]) -> bool {
        match self {
            BoolTree::Leaf(i) => labels[*i],
            BoolTree::Not(t) => !t.eval(labels),
            BoolTree::And(ts) => ts.iter().all(|t| t.eval(labels)),
            BoolTree::Or(ts) => ts.iter().any(|t| t.eval(labels)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            BoolTree::Leaf(_) => 0,
            BoolTree::Not(t) => 1 + t.depth(),
            BoolTree::And(ts) | BoolTree::Or(ts) => 1 + ts.iter().map(BoolTree::depth).max().unwrap_or(0),
        }
    }

    /// A random tree of connective depth at most `depth` over `labels` leaves.
    pub fn random<R: Rng>(rng: &mut R, labels: usize, depth: usize) -> BoolTree {
        if depth == 0 || rng.random_bool(0.25) {
            return BoolTree::Leaf(rng.random_range(0..labels));
        }
        match rng.random_range(0..3) {
            0 => BoolTree::Not(Box::new(Self::random(rng, labels, depth - 1))),
            k => {
                let children = (0..rng.random_range(2..=3))
                    .map(|_| Self::random(rng, labels, depth - 1))
                    .collect();
                if k == 1 {
                    BoolTree::And(children)
                } else {
                    BoolTree::Or(children)
                }
            }
        }
    }
}

/// Source, one Label node `l{i}` per label, Bool nodes for `tree`, and an
/// Output with the formula's value as `value` plus every label as `l{i}`.
pub fn bool_tree_plan(tree: &BoolTree, labels: &[String]) -> Plan {
    fn build(tree: &BoolTree, nodes: &mut Vec<PlanNode>) -> String {
        let (op, children): (BoolOp, Vec<&BoolTree>) = match tree {
            BoolTree::Leaf(i) => return format!("l{i}"),
            BoolTree::Not(t) => (BoolOp::Not, vec![t.as_ref()]),
            BoolTree::And(ts) => (BoolOp::And, ts.iter().collect()),
            BoolTree::Or(ts) => (BoolOp::Or, ts.iter().collect()),
        };
        let inputs = children.into_iter().map(|c| build(c, nodes)).collect();
        let id = format!("b{}", nodes.len());
        nodes.push(PlanNode::new(id.clone(), NodeOp::Bool { op, inputs }));
        id
    }
    let mut nodes = vec![PlanNode::new("src", NodeOp::Source)];
    for (i, label) in labels.iter().enumerate() {
        nodes.push(PlanNode::new(
            format!("l{i}"),
            NodeOp::Label {
                instruction: InstructionTemplate::literal(label.clone()),
                input: "src".into(),
            },
        ));
    }
    let root = build(tree, &mut nodes);
    let mut fields = vec![OutputField {
        name: "value".into(),
        node: root,
    }];
    fields.extend((0..labels.len()).map(|i| OutputField {
        name: format!("l{i}"),
        node: format!("l{i}"),
    }));
    nodes.push(PlanNode::new("out", NodeOp::Output { fields }));
    Plan {
        version: PLAN_VERSION.to_string(),
        nodes,
        output: "out".into(),
        provenance: None,
    }
}

/// A request captured by [`StubServer`].
#[derive(Debug, Clone, PartialEq)]
pub struct StubRequest {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

/// Reply chosen by a stub handler: HTTP status and raw body text.
pub type StubReply = (u16, String);

type Handler = dyn Fn(&StubRequest) -> StubReply + Send + Sync;

/// Minimal HTTP/1.1 server on an ephemeral port. Every connection carries
/// one request and is closed after the reply.
pub struct StubServer {
    url: String,
    requests: Arc<Mutex<Vec<StubRequest>>>,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    port: u16,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&StubRequest) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let port = listener.local_addr().expect("local addr").port();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let handle = {
            let (requests, hits, stop) = (requests.clone(), hits.clone(), stop.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (requests, hits, handler) = (requests.clone(), hits.clone(), handler.clone());
                    std::thread::spawn(move || {
                        if let Some(req) = serve(stream, &*handler) {
                            hits.fetch_add(1, Ordering::SeqCst);
                            requests.lock().expect("requests lock").push(req);
                        }
                    });
                }
            })
        };
        Self {
            url: format!("http://127.0.0.1:{port}"),
            requests,
            hits,
            stop,
            handle: Some(handle),
            port,
        }
    }

    /// Replies 200 with the JSON value the closure returns.
    pub fn json<F>(handler: F) -> Self
    where
        F: Fn(&StubRequest) -> Value + Send + Sync + 'static,
    {
        Self::start(move |r| (200, handler(r).to_string()))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().expect("requests lock").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(("127.0.0.1", self.port));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, handler: &Handler) -> Option<StubRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    let mut length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).ok()? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
            if k == "content-length" {
                length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    let request = StubRequest {
        path,
        headers,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    };
    let (status, reply) = handler(&request);
    let mut stream = stream;
    let head = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.len()
    );
    stream.write_all(head.as_bytes()).ok()?;
    stream.write_all(reply.as_bytes()).ok()?;
    stream.flush().ok()?;
    Some(request)
}

/// An OpenAI-style chat completion envelope around `content`.
pub fn chat_reply(content: &str) -> Value {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
    })
}
