use std::collections::{BTreeMap, HashSet};

use chrono::Utc;
use pieceforge_core::compose::{
    execute_graph, localize_fault, CompositionGraph, Edge, FaultReference, GraphNode, GraphOutput, IntegrationTest,
    PieceRegistry,
};
use pieceforge_core::model::to_canonical;
use pieceforge_core::{TestCase, TestSuite};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use crate::piece::{self, Program};
use crate::*;

const SLOTS: [&str; 3] = ["a", "b", "c"];

struct Dag {
    graph: CompositionGraph,
    programs: BTreeMap<String, Program>,
}

fn approved_suite(piece_id: &str, program: &Program, input: Value) -> TestSuite {
    let expected = program.eval(&input).expect("fixture program evaluates");
    let mut s = TestSuite::draft(piece_id, 1, vec![TestCase::new("only", input, expected)]).unwrap();
    s.submit_for_review().unwrap();
    s.approve("fixture", Utc::now()).unwrap();
    s
}

fn random_dag(rng: &mut StdRng, index: usize) -> Dag {
    let k = rng.gen_range(1..=DAG_MAX_NODES);
    let inputs: Vec<String> = (1..=rng.gen_range(1..=2)).map(|i| format!("x{i}")).collect();
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut programs = BTreeMap::new();
    for i in 0..k {
        let node_id = format!("n{i}");
        let slots = &SLOTS[..rng.gen_range(1..=SLOTS.len())];
        let mut terms = Vec::new();
        for slot in slots {
            let source = rng.gen_range(0..inputs.len() + i);
            let (from, from_path) = if source < inputs.len() {
                (inputs[source].clone(), String::new())
            } else {
                (format!("n{}", source - inputs.len()), ["v", "w"][rng.gen_range(0..2)].to_string())
            };
            edges.push(Edge { from, from_path, to: node_id.clone(), to_path: slot.to_string() });
            terms.push((slot.to_string(), rng.gen_range(-9..=9)));
        }
        let program = Program::Affine { terms, c: rng.gen_range(-100..=100), pair: true };
        let candidate = program.candidate();
        nodes.push(GraphNode { node_id: node_id.clone(), piece_id: format!("d{index}{node_id}"), candidate_id: candidate.candidate_id });
        programs.insert(node_id, program);
    }
    let used: HashSet<&str> = edges.iter().map(|e| e.from.as_str()).collect();
    let mut outputs: Vec<GraphOutput> = nodes
        .iter()
        .filter(|n| !used.contains(n.node_id.as_str()))
        .map(|n| GraphOutput { name: format!("o_{}", n.node_id), from: n.node_id.clone(), from_path: "v".into() })
        .collect();
    let pick = &nodes[rng.gen_range(0..nodes.len())];
    outputs.push(GraphOutput { name: "extra".into(), from: pick.node_id.clone(), from_path: "w".into() });
    let graph_inputs = inputs.iter().filter(|x| used.contains(x.as_str())).cloned().collect();
    // declaration order must not matter
    nodes.shuffle(rng);
    edges.shuffle(rng);
    Dag {
        graph: CompositionGraph { graph_id: format!("dag{index}"), nodes, edges, graph_inputs, graph_outputs: outputs },
        programs,
    }
}

fn select(v: &Value, path: &str) -> Value {
    if path.is_empty() {
        v.clone()
    } else {
        v[path].clone()
    }
}

/// Evaluates the DAG in process, by repeated sweeps rather than a sort.
fn oracle(dag: &Dag, inputs: &Map<String, Value>) -> Map<String, Value> {
    let mut values: BTreeMap<String, Value> = BTreeMap::new();
    let value_of = |values: &BTreeMap<String, Value>, name: &str| values.get(name).cloned().or_else(|| inputs.get(name).cloned());
    while values.len() < dag.programs.len() {
        for (node, program) in &dag.programs {
            if values.contains_key(node) {
                continue;
            }
            let incoming: Vec<&Edge> = dag.graph.edges.iter().filter(|e| &e.to == node).collect();
            if incoming.iter().all(|e| value_of(&values, &e.from).is_some()) {
                let mut arg = Map::new();
                for e in incoming {
                    arg.insert(e.to_path.clone(), select(&value_of(&values, &e.from).unwrap(), &e.from_path));
                }
                values.insert(node.clone(), program.eval(&Value::Object(arg)).unwrap());
            }
        }
    }
    dag.graph.graph_outputs.iter().map(|o| (o.name.clone(), select(&values[&o.from], &o.from_path))).collect()
}

fn registry(dag: &Dag) -> PieceRegistry {
    let mut reg = PieceRegistry::new();
    reg.add_profile(piece::profile());
    for node in &dag.graph.nodes {
        let program = &dag.programs[&node.node_id];
        let input = json!({"a": 1, "b": 2, "c": 3});
        reg.add_candidate(program.candidate()).add_suite(approved_suite(&node.piece_id, program, input));
    }
    reg
}

pub fn oracle_equivalence() -> Check {
    let mut rng = StdRng::seed_from_u64(SEED ^ 0xda6);
    let mut runs = 0;
    let mut node_runs = 0;
    for d in 0..DAG_COUNT {
        let dag = random_dag(&mut rng, d);
        let reg = registry(&dag);
        for i in 0..INPUTS_PER_DAG {
            let inputs: Map<String, Value> =
                dag.graph.graph_inputs.iter().map(|x| (x.clone(), json!(rng.gen_range(-1000..=1000)))).collect();
            let run = execute_graph(&dag.graph, &inputs, &reg).map_err(|e| format!("dag {d}: {e}"))?;
            let got = run.outputs.ok_or_else(|| format!("dag {d} input {i}: run failed: {:?}", run.trace.per_node.last()))?;
            let want = oracle(&dag, &inputs);
            if to_canonical(&got).unwrap() != to_canonical(&want).unwrap() {
                return Err(format!("dag {d} input {i}: got {got:?}, oracle {want:?}"));
            }
            runs += 1;
            node_runs += run.trace.per_node.len();
        }
    }
    Ok(format!("{runs}/{} graph runs ({node_runs} node executions over {DAG_COUNT} DAGs) match the oracle exactly", DAG_COUNT * INPUTS_PER_DAG))
}

fn chain(pins: &[String]) -> CompositionGraph {
    let ids: Vec<String> = (1..=pins.len()).map(|i| format!("s{i}")).collect();
    let mut edges = vec![Edge { from: "x".into(), from_path: String::new(), to: ids[0].clone(), to_path: "n".into() }];
    for w in ids.windows(2) {
        edges.push(Edge { from: w[0].clone(), from_path: String::new(), to: w[1].clone(), to_path: "n".into() });
    }
    CompositionGraph {
        graph_id: "chain".into(),
        nodes: ids
            .iter()
            .zip(pins)
            .enumerate()
            .map(|(i, (id, c))| GraphNode { node_id: id.clone(), piece_id: format!("stage{}", i + 1), candidate_id: c.clone() })
            .collect(),
        edges,
        graph_inputs: vec!["x".into()],
        graph_outputs: vec![GraphOutput { name: "y".into(), from: ids.last().unwrap().clone(), from_path: String::new() }],
    }
}

pub fn fault_localization() -> Check {
    let mut rng = StdRng::seed_from_u64(SEED ^ 0x10c);
    let good: Vec<Program> = (1..=CHAIN_LEN as i64).map(|j| Program::affine(&[("n", 1)], j, false)).collect();
    let good_ids: Vec<String> = good.iter().map(|p| p.candidate().candidate_id).collect();
    let mut hits = [0usize; 2];
    for trial in 0..LOCALIZATION_TRIALS {
        let fault = rng.gen_range(0..CHAIN_LEN);
        let delta = rng.gen_range(1..=50) * if rng.gen_bool(0.5) { 1 } else { -1 };
        let bad = Program::affine(&[("n", 1)], fault as i64 + 1 + delta, false);
        let mut reg = PieceRegistry::new();
        reg.add_profile(piece::profile()).add_candidate(bad.candidate());
        for (j, p) in good.iter().enumerate() {
            let mut cases = Vec::new();
            for n in [0, 7, -3] {
                cases.push(TestCase::new(format!("n{n}"), json!({"n": n}), p.eval(&json!({"n": n})).unwrap()));
            }
            let mut suite = TestSuite::draft(format!("stage{}", j + 1), 1, cases).unwrap();
            suite.submit_for_review().unwrap();
            suite.approve("fixture", Utc::now()).unwrap();
            reg.add_candidate(p.candidate()).add_suite(suite);
        }
        let mut pins = good_ids.clone();
        pins[fault] = bad.candidate().candidate_id;
        let faulty = chain(&pins);
        let x: i64 = rng.gen_range(-500..=500);
        let inputs: Map<String, Value> = [("x".to_string(), json!(x))].into_iter().collect();
        let expected_y = good.iter().fold(json!(x), |v, p| p.eval(&json!({ "n": v })).unwrap());
        let test = IntegrationTest {
            test_id: format!("t{trial}"),
            inputs: inputs.clone(),
            expected: [("y".to_string(), expected_y)].into_iter().collect(),
            comparison: Default::default(),
        };
        let live = execute_graph(&faulty, &inputs, &reg).map_err(|e| e.to_string())?.trace;
        let reference = execute_graph(&chain(&good_ids), &inputs, &reg).map_err(|e| e.to_string())?.trace;
        let want = format!("s{}", fault + 1);
        for (mode, reference) in [FaultReference::Trace(&reference), FaultReference::UnitSuites].into_iter().enumerate() {
            let report = localize_fault(&faulty, &test, &live, reference, &reg, 2).map_err(|e| e.to_string())?;
            if report.suspect_node.as_deref() == Some(want.as_str()) {
                hits[mode] += 1;
            } else {
                return Err(format!("trial {trial} mode {mode}: injected {want}, suspect {:?}", report.suspect_node));
            }
        }
    }
    Ok(format!(
        "{}/{LOCALIZATION_TRIALS} reference-trace trials and {}/{LOCALIZATION_TRIALS} unit-suite trials named the injected node",
        hits[0], hits[1]
    ))
}
