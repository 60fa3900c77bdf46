//! Dataflow composition of approved pieces.
//!
//! A [`CompositionGraph`] wires pinned candidates into a DAG. Execution is
//! fail-fast in a deterministic topological order (ties broken by node id),
//! and every run leaves a [`TraceRecord`]. Fault localization compares a
//! failing trace against a reference trace, or falls back to re-running each
//! node's own unit suite.

pub mod path;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backend::{excerpt, summarize, Backend, PromptTemplate, STDERR_EXCERPT_LIMIT};
use crate::journal::{actions, new_run_id, refs, Actor, EventDraft, Journal, JournalError};
use crate::model::{canonicalize_value, compare_outputs, slug_violation, CodeCandidate, ComparisonMode, MatchReport, TestSuite, Violation};
use crate::sandbox::{execute_piece, ExecutionResult, RunnerProfile};
use crate::synth::{run_suite, SynthError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: String,
    pub piece_id: String,
    pub candidate_id: String,
}

/// `from` names a node or a graph input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    #[serde(default)]
    pub from_path: String,
    pub to: String,
    #[serde(default)]
    pub to_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOutput {
    pub name: String,
    pub from: String,
    #[serde(default)]
    pub from_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionGraph {
    pub graph_id: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
    pub graph_inputs: Vec<String>,
    pub graph_outputs: Vec<GraphOutput>,
}

#[derive(Debug, thiserror::Error)]
pub enum ComposeError {
    #[error("invalid graph: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("missing graph input {0:?}")]
    MissingInput(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl From<SynthError> for ComposeError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Journal(j) => ComposeError::Journal(j),
            other => ComposeError::Configuration(other.to_string()),
        }
    }
}

impl CompositionGraph {
    pub fn node(&self, node_id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    /// Kahn's algorithm with the ready set ordered by node id.
    /// Returns `None` when the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.node_id.as_str()).collect();
        let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
        let mut succ: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for e in &self.edges {
            if ids.contains(e.from.as_str()) && ids.contains(e.to.as_str()) {
                if succ.entry(e.from.as_str()).or_default().insert(e.to.as_str()) {
                    *indegree.get_mut(e.to.as_str()).expect("known node") += 1;
                }
            }
        }
        let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(ids.len());
        while let Some(id) = ready.pop_first() {
            order.push(id.to_string());
            for next in succ.get(id).into_iter().flatten() {
                let d = indegree.get_mut(next).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.insert(next);
                }
            }
        }
        (order.len() == ids.len()).then_some(order)
    }

    /// Transitive predecessors of `node_id` among the nodes.
    pub fn ancestors(&self, node_id: &str) -> HashSet<String> {
        let mut seen = HashSet::new();
        let mut stack = vec![node_id.to_string()];
        while let Some(n) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.to == n) {
                if self.node(&e.from).is_some() && seen.insert(e.from.clone()) {
                    stack.push(e.from.clone());
                }
            }
        }
        seen
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for n in &self.nodes {
            adj.entry(n.node_id.as_str()).or_default();
        }
        for e in &self.edges {
            if adj.contains_key(e.from.as_str()) && adj.contains_key(e.to.as_str()) {
                adj.get_mut(e.from.as_str()).expect("present").insert(e.to.as_str());
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color: HashMap<&str, u8> = HashMap::new();
        let mut stack: Vec<&str> = Vec::new();
        fn visit<'a>(
            n: &'a str,
            adj: &BTreeMap<&'a str, BTreeSet<&'a str>>,
            color: &mut HashMap<&'a str, u8>,
            stack: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            color.insert(n, 1);
            stack.push(n);
            for &m in &adj[n] {
                match color.get(m).copied().unwrap_or(0) {
                    1 => {
                        let start = stack.iter().position(|s| *s == m).expect("on stack");
                        return Some(stack[start..].iter().map(|s| s.to_string()).collect());
                    }
                    0 => {
                        if let Some(c) = visit(m, adj, color, stack) {
                            return Some(c);
                        }
                    }
                    _ => {}
                }
            }
            stack.pop();
            color.insert(n, 2);
            None
        }
        let keys: Vec<&str> = adj.keys().copied().collect();
        for n in keys {
            if color.get(n).copied().unwrap_or(0) == 0 {
                if let Some(c) = visit(n, &adj, &mut color, &mut stack) {
                    return Some(c);
                }
            }
        }
        None
    }
}

/// Structural checks; cycles are reported with their node list.
pub fn validate_graph(graph: &CompositionGraph) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    v.extend(slug_violation("graph_id", &graph.graph_id));
    let mut node_ids = HashSet::new();
    for n in &graph.nodes {
        if n.node_id.is_empty() {
            v.push(Violation::new("nodes", "empty node_id"));
        } else if !node_ids.insert(n.node_id.as_str()) {
            v.push(Violation::new("nodes", format!("duplicate node_id {}", n.node_id)));
        }
        if n.candidate_id.is_empty() {
            v.push(Violation::new("nodes", format!("node {} has no pinned candidate", n.node_id)));
        }
    }
    let mut input_names = HashSet::new();
    for name in &graph.graph_inputs {
        if !input_names.insert(name.as_str()) {
            v.push(Violation::new("graph_inputs", format!("duplicate input {name}")));
        }
        if node_ids.contains(name.as_str()) {
            v.push(Violation::new("graph_inputs", format!("input {name} shadows a node id")));
        }
    }
    let mut bindings: BTreeMap<&str, Vec<(Vec<path::Segment>, &str)>> = BTreeMap::new();
    for (i, e) in graph.edges.iter().enumerate() {
        if !node_ids.contains(e.from.as_str()) && !input_names.contains(e.from.as_str()) {
            v.push(Violation::new("edges", format!("edge {i}: unknown source {}", e.from)));
        }
        if !node_ids.contains(e.to.as_str()) {
            v.push(Violation::new("edges", format!("edge {i}: unknown target {}", e.to)));
        }
        if let Err(err) = path::parse(&e.from_path) {
            v.push(Violation::new("edges", format!("edge {i}: {err}")));
        }
        match path::parse(&e.to_path) {
            Err(err) => v.push(Violation::new("edges", format!("edge {i}: {err}"))),
            Ok(p) => {
                let bound = bindings.entry(e.to.as_str()).or_default();
                if let Some((_, other)) = bound.iter().find(|(q, _)| *q == p) {
                    v.push(Violation::new(
                        "edges",
                        format!("duplicate binding: {}.{} (also bound to {other})", e.to, e.to_path),
                    ));
                } else if bound.iter().any(|(q, _)| path::overlaps(q, &p)) {
                    v.push(Violation::new("edges", format!("conflicting binding: {}.{}", e.to, e.to_path)));
                }
                bound.push((p, e.to_path.as_str()));
            }
        }
    }
    let mut output_names = HashSet::new();
    for o in &graph.graph_outputs {
        if !output_names.insert(o.name.as_str()) {
            v.push(Violation::new("graph_outputs", format!("duplicate output {}", o.name)));
        }
        if !node_ids.contains(o.from.as_str()) {
            v.push(Violation::new("graph_outputs", format!("output {} reads unknown node {}", o.name, o.from)));
        }
        if let Err(err) = path::parse(&o.from_path) {
            v.push(Violation::new("graph_outputs", format!("output {}: {err}", o.name)));
        }
    }
    if let Some(cycle) = graph.find_cycle() {
        v.push(Violation::new("cycle", format!("[{}]", cycle.join(","))));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Candidates, runner profiles and approved suites available to graphs.
#[derive(Debug, Clone, Default)]
pub struct PieceRegistry {
    candidates: HashMap<String, CodeCandidate>,
    profiles: HashMap<String, RunnerProfile>,
    suites: HashMap<String, TestSuite>,
}

impl PieceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_candidate(&mut self, c: CodeCandidate) -> &mut Self {
        self.candidates.insert(c.candidate_id.clone(), c);
        self
    }

    pub fn add_profile(&mut self, p: RunnerProfile) -> &mut Self {
        self.profiles.insert(p.name.clone(), p);
        self
    }

    /// Registers a piece's approved unit suite; unapproved suites are ignored.
    pub fn add_suite(&mut self, s: TestSuite) -> &mut Self {
        if s.is_approved() {
            self.suites.insert(s.piece_id().to_string(), s);
        }
        self
    }

    pub fn candidate(&self, id: &str) -> Option<&CodeCandidate> {
        self.candidates.get(id)
    }

    pub fn profile(&self, name: &str) -> Option<&RunnerProfile> {
        self.profiles.get(name)
    }

    pub fn suite(&self, piece_id: &str) -> Option<&TestSuite> {
        self.suites.get(piece_id)
    }

    /// Pinned candidates must exist, have a profile and belong to a piece
    /// with an approved suite.
    pub fn check_pins(&self, graph: &CompositionGraph) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        for n in &graph.nodes {
            match self.candidates.get(&n.candidate_id) {
                None => v.push(Violation::new("nodes", format!("node {}: unknown candidate {}", n.node_id, n.candidate_id))),
                Some(c) if !self.profiles.contains_key(&c.runner_profile) => v.push(Violation::new(
                    "nodes",
                    format!("node {}: unknown runner profile {}", n.node_id, c.runner_profile),
                )),
                Some(_) => {}
            }
            if !self.suites.contains_key(&n.piece_id) {
                v.push(Violation::new("nodes", format!("node {}: piece {} has no approved suite", n.node_id, n.piece_id)));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

// ============================================================
// Execution
// ============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeOutcome {
    Output { value: Value },
    Failed { execution: ExecutionResult },
    /// The node's input could not be assembled from the named edge.
    InputError { edge: String, detail: String },
}

impl NodeOutcome {
    pub fn value(&self) -> Option<&Value> {
        match self {
            NodeOutcome::Output { value } => Some(value),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub node_id: String,
    pub input: Value,
    pub outcome: NodeOutcome,
    /// Seconds.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub graph_id: String,
    pub per_node: Vec<NodeTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_outputs: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_error: Option<String>,
}

impl TraceRecord {
    pub fn node(&self, node_id: &str) -> Option<&NodeTrace> {
        self.per_node.iter().find(|n| n.node_id == node_id)
    }

    pub fn failed_node(&self) -> Option<&NodeTrace> {
        self.per_node.iter().find(|n| n.outcome.value().is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRun {
    pub outputs: Option<Map<String, Value>>,
    pub trace: TraceRecord,
}

fn check_runnable(graph: &CompositionGraph, registry: &PieceRegistry) -> Result<Vec<String>, ComposeError> {
    validate_graph(graph).map_err(ComposeError::Invalid)?;
    registry.check_pins(graph).map_err(ComposeError::Invalid)?;
    Ok(graph.topological_order().expect("validated graphs are acyclic"))
}

fn edge_label(e: &Edge) -> String {
    format!("{}.{} -> {}.{}", e.from, e.from_path, e.to, e.to_path)
}

/// Runs the graph once. Node failures end up in the trace, not in the error.
pub fn execute_graph(
    graph: &CompositionGraph,
    inputs: &Map<String, Value>,
    registry: &PieceRegistry,
) -> Result<GraphRun, ComposeError> {
    let order = check_runnable(graph, registry)?;
    if let Some(missing) = graph.graph_inputs.iter().find(|n| !inputs.contains_key(*n)) {
        return Err(ComposeError::MissingInput(missing.clone()));
    }
    let run_id = new_run_id();
    let mut outputs: HashMap<&str, Value> = HashMap::new();
    let mut per_node = Vec::with_capacity(order.len());
    let mut failed = false;

    for node_id in &order {
        let node = graph.node(node_id).expect("ordered ids exist");
        let started = Instant::now();
        let mut edges: Vec<&Edge> = graph.edges.iter().filter(|e| &e.to == node_id).collect();
        edges.sort_by(|a, b| a.to_path.cmp(&b.to_path));

        let mut input = Value::Object(Map::new());
        let mut input_error = None;
        for e in edges {
            let source = match inputs.get(&e.from) {
                Some(v) if graph.node(&e.from).is_none() => v,
                _ => &outputs[e.from.as_str()],
            };
            let from = path::parse(&e.from_path).expect("validated");
            let Some(value) = path::get(source, &from) else {
                input_error = Some((edge_label(e), format!("path {:?} not found in {}", e.from_path, e.from)));
                break;
            };
            let to = path::parse(&e.to_path).expect("validated");
            if let Err(detail) = path::set(&mut input, &to, value.clone()) {
                input_error = Some((edge_label(e), detail));
                break;
            }
        }
        let outcome = match input_error {
            Some((edge, detail)) => NodeOutcome::InputError { edge, detail },
            None => {
                let candidate = registry.candidate(&node.candidate_id).expect("pins checked");
                let profile = registry.profile(&candidate.runner_profile).expect("pins checked");
                let result =
                    execute_piece(candidate, &input, profile).map_err(|e| ComposeError::Configuration(e.to_string()))?;
                match (result.is_ok(), result.output.clone()) {
                    (true, Some(value)) => NodeOutcome::Output { value },
                    _ => NodeOutcome::Failed { execution: result },
                }
            }
        };
        if let Some(v) = outcome.value() {
            outputs.insert(node_id.as_str(), v.clone());
        } else {
            failed = true;
        }
        per_node.push(NodeTrace {
            node_id: node_id.clone(),
            input,
            outcome,
            duration: started.elapsed().as_secs_f64(),
        });
        if failed {
            break;
        }
    }

    let mut trace = TraceRecord { run_id, graph_id: graph.graph_id.clone(), per_node, graph_outputs: None, output_error: None };
    if !failed {
        let mut out = Map::new();
        for o in &graph.graph_outputs {
            let p = path::parse(&o.from_path).expect("validated");
            match path::get(&outputs[o.from.as_str()], &p) {
                Some(v) => {
                    out.insert(o.name.clone(), v.clone());
                }
                None => {
                    trace.output_error = Some(format!("output {}: path {:?} not found in {}", o.name, o.from_path, o.from));
                    break;
                }
            }
        }
        if trace.output_error.is_none() {
            trace.graph_outputs = Some(out);
        }
    }
    Ok(GraphRun { outputs: trace.graph_outputs.clone(), trace })
}

// ============================================================
// Integration tests
// ============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationTest {
    pub test_id: String,
    pub inputs: Map<String, Value>,
    pub expected: Map<String, Value>,
    /// Per-output comparison; outputs not listed compare exactly.
    #[serde(default)]
    pub comparison: BTreeMap<String, ComparisonMode>,
}

impl IntegrationTest {
    pub fn validate(&self, graph: &CompositionGraph) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        for name in &graph.graph_inputs {
            if !self.inputs.contains_key(name) {
                v.push(Violation::new("inputs", format!("missing graph input {name}")));
            }
        }
        if self.expected.is_empty() {
            v.push(Violation::new("expected", "must name at least one graph output"));
        }
        for name in self.expected.keys() {
            if !graph.graph_outputs.iter().any(|o| &o.name == name) {
                v.push(Violation::new("expected", format!("unknown graph output {name}")));
            }
        }
        for (name, mode) in &self.comparison {
            if let Err(e) = mode.validate() {
                v.push(Violation::new("comparison", format!("{name}: {e}")));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn mode_for(&self, output: &str) -> ComparisonMode {
        self.comparison.get(output).cloned().unwrap_or_default()
    }

    /// Per expected output: the match against `outputs` (absent outputs never match).
    pub fn check(&self, outputs: Option<&Map<String, Value>>) -> Vec<(String, MatchReport)> {
        self.expected
            .iter()
            .map(|(name, expected)| {
                let report = match outputs.and_then(|o| o.get(name)) {
                    Some(actual) => compare_outputs(expected, actual, &self.mode_for(name)),
                    None => MatchReport::mismatch(format!("output {name} absent")),
                };
                (name.clone(), report)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationResult {
    pub test_id: String,
    pub passed: bool,
    pub outputs: Vec<(String, MatchReport)>,
    pub trace: TraceRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub graph_id: String,
    pub results: Vec<IntegrationResult>,
}

impl IntegrationReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn result(&self, test_id: &str) -> Option<&IntegrationResult> {
        self.results.iter().find(|r| r.test_id == test_id)
    }
}

/// Runs each test independently; traces of failing tests are persisted.
pub fn run_integration_suite(
    graph: &CompositionGraph,
    tests: &[IntegrationTest],
    registry: &PieceRegistry,
    journal: &mut dyn Journal,
) -> Result<IntegrationReport, ComposeError> {
    check_runnable(graph, registry)?;
    let mut bad = Vec::new();
    for t in tests {
        if let Err(v) = t.validate(graph) {
            bad.extend(v.into_iter().map(|x| Violation::new(format!("test {}", t.test_id), x.to_string())));
        }
    }
    if !bad.is_empty() {
        return Err(ComposeError::Invalid(bad));
    }
    let mut report = IntegrationReport { graph_id: graph.graph_id.clone(), results: Vec::new() };
    for t in tests {
        let run = execute_graph(graph, &t.inputs, registry)?;
        let outputs = t.check(run.outputs.as_ref());
        let passed = outputs.iter().all(|(_, m)| m.matched);
        if !passed {
            journal.save_trace(&run.trace)?;
        }
        report.results.push(IntegrationResult { test_id: t.test_id.clone(), passed, outputs, trace: run.trace });
    }
    if !tests.is_empty() {
        let failing: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.test_id.as_str()).collect();
        let trace_refs = report.results.iter().filter(|r| !r.passed).map(|r| refs::trace(&r.trace.run_id));
        journal.record(EventDraft::new(
            Actor::System,
            actions::RUN_COMPLETED,
            std::iter::once(refs::graph(&graph.graph_id)).chain(trace_refs).collect(),
            json!({ "kind": "integration", "tests": tests.len(), "failing": failing }),
        ))?;
    }
    Ok(report)
}

// ============================================================
// Fault localization
// ============================================================

pub enum FaultReference<'a> {
    /// A trace of a known-good run on the same inputs.
    Trace(&'a TraceRecord),
    /// Each node's approved unit suite, taken from the registry.
    UnitSuites,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suspect_node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_at_node: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_at_node: Option<NodeOutcome>,
    pub upstream_verified: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    pub method: String,
}

fn verified_ancestors(graph: &CompositionGraph, order: &[String], suspect: &str, verified: &HashSet<String>) -> Vec<String> {
    let ancestors = graph.ancestors(suspect);
    order.iter().filter(|n| ancestors.contains(*n) && verified.contains(*n)).cloned().collect()
}

/// Finds the first node that diverges for `test` in the `live` trace.
pub fn localize_fault(
    graph: &CompositionGraph,
    test: &IntegrationTest,
    live: &TraceRecord,
    reference: FaultReference<'_>,
    registry: &PieceRegistry,
    parallel_tests: usize,
) -> Result<DivergenceReport, ComposeError> {
    let order = check_runnable(graph, registry)?;
    match reference {
        FaultReference::Trace(reference) => Ok(localize_by_trace(graph, &order, live, reference)),
        FaultReference::UnitSuites => localize_by_unit_suites(graph, &order, test, live, registry, parallel_tests),
    }
}

fn localize_by_trace(
    graph: &CompositionGraph,
    order: &[String],
    live: &TraceRecord,
    reference: &TraceRecord,
) -> DivergenceReport {
    let mut verified = HashSet::new();
    for node_id in order {
        let expected = reference.node(node_id).and_then(|n| n.outcome.value());
        let actual = live.node(node_id);
        let same = match (expected, actual.and_then(|n| n.outcome.value())) {
            (Some(e), Some(a)) => compare_outputs(e, a, &ComparisonMode::ExactCanonical).matched,
            (None, None) => actual.is_none() && reference.node(node_id).is_none(),
            _ => false,
        };
        if same {
            verified.insert(node_id.clone());
            continue;
        }
        if actual.is_none() && expected.is_none() {
            continue;
        }
        return DivergenceReport {
            suspect_node: Some(node_id.clone()),
            expected_at_node: expected.cloned(),
            actual_at_node: actual.map(|n| n.outcome.clone()),
            upstream_verified: verified_ancestors(graph, order, node_id, &verified),
            summary: None,
            method: "reference_trace".into(),
        };
    }
    DivergenceReport {
        suspect_node: None,
        expected_at_node: None,
        actual_at_node: None,
        upstream_verified: order.to_vec(),
        summary: None,
        method: "reference_trace".into(),
    }
}

fn localize_by_unit_suites(
    graph: &CompositionGraph,
    order: &[String],
    test: &IntegrationTest,
    live: &TraceRecord,
    registry: &PieceRegistry,
    parallel_tests: usize,
) -> Result<DivergenceReport, ComposeError> {
    if graph.nodes.iter().all(|n| registry.suite(&n.piece_id).is_none()) {
        return Err(ComposeError::Configuration("no reference trace and no unit suites to localize with".into()));
    }
    let report = |suspect: &str, verified: &HashSet<String>, summary: Option<String>| DivergenceReport {
        suspect_node: Some(suspect.to_string()),
        expected_at_node: None,
        actual_at_node: live.node(suspect).map(|n| n.outcome.clone()),
        upstream_verified: verified_ancestors(graph, order, suspect, verified),
        summary,
        method: "unit_suites".into(),
    };
    let mut verified = HashSet::new();
    for node_id in order {
        let node = graph.node(node_id).expect("ordered ids exist");
        let Some(suite) = registry.suite(&node.piece_id) else { continue };
        let candidate = registry.candidate(&node.candidate_id).expect("pins checked");
        let profile = registry.profile(&candidate.runner_profile).expect("pins checked");
        let run = run_suite(candidate, suite, profile, parallel_tests)?;
        if !run.passed {
            let failing: Vec<&str> =
                run.failures.iter().flat_map(|f| f.entries.iter().map(|e| e.case_id.as_str())).collect();
            let summary = format!("unit suite of {} fails cases: {}", node.piece_id, failing.join(", "));
            return Ok(report(node_id, &verified, Some(summary)));
        }
        verified.insert(node_id.clone());
    }
    // Every unit suite passes: fall back to the live trace.
    if let Some(n) = live.failed_node() {
        return Ok(report(&n.node_id, &verified, Some("unit suites pass; node failed at run time".into())));
    }
    let checks = test.check(live.graph_outputs.as_ref());
    let position = |id: &str| order.iter().position(|n| n == id).unwrap_or(usize::MAX);
    let projected = checks
        .iter()
        .filter(|(_, m)| !m.matched)
        .filter_map(|(name, _)| graph.graph_outputs.iter().find(|o| &o.name == name))
        .map(|o| o.from.as_str())
        .min_by_key(|id| position(id));
    if let Some(node_id) = projected {
        let mut r = report(node_id, &verified, Some("unit suites pass; node produces the mismatching graph output".into()));
        r.expected_at_node = None;
        return Ok(r);
    }
    let sink = order.last().cloned().unwrap_or_default();
    Ok(report(&sink, &verified, Some("inconclusive: all unit suites pass and no output mismatch is attributable".into())))
}

/// Renders a per-node digest of a trace for the summarizing backend.
pub fn trace_digest(trace: &TraceRecord) -> String {
    let mut out = String::new();
    for n in &trace.per_node {
        let input = canonicalize_value(&n.input).unwrap_or_default();
        out.push_str(&format!("node {}:\n  input: {input}\n", n.node_id));
        match &n.outcome {
            NodeOutcome::Output { value } => {
                out.push_str(&format!("  output: {}\n", canonicalize_value(value).unwrap_or_default()))
            }
            NodeOutcome::Failed { execution } => {
                out.push_str(&format!("  failed: {}\n", serde_json::to_string(&execution.status).unwrap_or_default()));
                let stderr = excerpt(&execution.stderr_raw, STDERR_EXCERPT_LIMIT);
                if !stderr.is_empty() {
                    out.push_str(&format!("  stderr: {stderr}\n"));
                }
            }
            NodeOutcome::InputError { edge, detail } => out.push_str(&format!("  input error on {edge}: {detail}\n")),
        }
    }
    out
}

/// Asks the backend for an advisory summary. Backend failures yield `None`.
pub fn summarize_failure(
    trace: &TraceRecord,
    backend: &mut dyn Backend,
    template: &PromptTemplate,
) -> Result<Option<String>, ComposeError> {
    if trace.per_node.is_empty() {
        return Err(ComposeError::Precondition("trace has no nodes".into()));
    }
    Ok(summarize(template, trace_digest(trace), backend).ok())
}
