#![allow(dead_code)]

use chrono::Utc;
use pieceforge_core::backend::{RequestKind, Script};
use pieceforge_core::sandbox::RunnerProfile;
use pieceforge_core::{CodeCandidate, PieceSpec, TestCase, TestSuite};
use serde_json::{json, Value};

pub fn py_profile() -> RunnerProfile {
    RunnerProfile::new("py", &["python3", "{file}"], ".py")
}

pub fn spec(id: &str) -> PieceSpec {
    PieceSpec {
        id: id.into(),
        title: id.into(),
        description: format!("The {id} piece."),
        hints: vec![],
        input_shape: "{\"n\": integer}".into(),
        output_shape: "integer".into(),
        runner_profile: "py".into(),
        version: 1,
    }
}

/// Python source reading `{"n": ...}` and printing `expr` (in terms of `n`).
pub fn py_source(expr: &str) -> String {
    format!("import sys, json\nn = json.loads(sys.stdin.readline())[\"n\"]\nprint(json.dumps({expr}))\n")
}

pub fn py_candidate(expr: &str) -> CodeCandidate {
    CodeCandidate::new(py_source(expr), "py", 1, "test")
}

pub fn fenced(source: &str) -> String {
    format!("Here you go.\n```python\n{source}```\n")
}

pub fn approved(piece: &str, cases: Vec<TestCase>) -> TestSuite {
    let mut s = TestSuite::draft(piece, 1, cases).unwrap();
    s.submit_for_review().unwrap();
    s.approve("ann", Utc::now()).unwrap();
    s
}

/// Cases `n -> f(n)` for the given inputs.
pub fn cases(inputs: &[i64], f: impl Fn(i64) -> i64) -> Vec<TestCase> {
    inputs.iter().map(|n| TestCase::new(format!("n{n}"), json!({ "n": n }), json!(f(*n)))).collect()
}

pub fn inc_suite(piece: &str) -> TestSuite {
    approved(piece, cases(&[0, 1, 5], |n| n + 1))
}

pub fn tests_reply(cases: Value) -> String {
    format!("```json\n{}\n```", json!({ "cases": cases }))
}

pub fn explanation_reply(ids: &[&str]) -> String {
    let per_case: Vec<Value> = ids
        .iter()
        .map(|id| json!({"case_id": id, "summary": format!("checks {id}"), "reasoning": format!("{id} is a typical value")}))
        .collect();
    format!("```json\n{}\n```", json!({"per_case": per_case, "coverage_notes": "small integers"}))
}

/// Script whose code replies are the given expressions, first as generation,
/// the rest as repairs.
pub fn code_script(exprs: &[&str]) -> Script {
    let mut s = Script::default();
    if let Some((first, rest)) = exprs.split_first() {
        s.push(RequestKind::GenerateCode, fenced(&py_source(first)));
        for e in rest {
            s.push(RequestKind::RepairCode, fenced(&py_source(e)));
        }
    }
    s
}
