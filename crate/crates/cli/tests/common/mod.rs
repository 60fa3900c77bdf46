#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use pieceforge_core::backend::{BackendConfig, RequestKind, Script};
use pieceforge_core::model::to_canonical;
use pieceforge_core::sandbox::RunnerProfile;
use pieceforge_core::ProjectConfig;
use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_pieceforge");

pub fn py_source(expr: &str) -> String {
    format!("import sys, json\nn = json.loads(sys.stdin.readline())[\"n\"]\nprint(json.dumps({expr}))\n")
}

pub fn fenced(source: &str) -> String {
    format!("```\n{source}```\n")
}

pub fn tests_reply(cases: Value) -> String {
    format!("```json\n{}\n```", json!({ "cases": cases }))
}

pub fn explanation_reply(ids: &[&str]) -> String {
    let per_case: Vec<Value> =
        ids.iter().map(|id| json!({"case_id": id, "summary": "", "reasoning": format!("{id} is typical")})).collect();
    format!("```json\n{}\n```", json!({"per_case": per_case, "coverage_notes": "small integers"}))
}

/// `zero`, `one` and a wrong `big` case, plus explanations for the
/// draft and for a corrected `big`.
pub fn review_replies(s: &mut Script) {
    s.push(
        RequestKind::GenerateTests,
        tests_reply(json!([
            {"case_id": "zero", "input": {"n": 0}, "expected": 1},
            {"case_id": "one", "input": {"n": 1}, "expected": 2},
            {"case_id": "big", "input": {"n": 100}, "expected": 1000}
        ])),
    )
    .push(RequestKind::ExplainTests, explanation_reply(&["zero", "one", "big"]))
    .push(RequestKind::ExplainTests, explanation_reply(&["big"]));
}

/// Code replies for the given expressions: one generation, then repairs.
pub fn code_replies(s: &mut Script, exprs: &[&str]) {
    for (i, e) in exprs.iter().enumerate() {
        let kind = if i == 0 { RequestKind::GenerateCode } else { RequestKind::RepairCode };
        s.push(kind, fenced(&py_source(e)));
    }
}

pub fn spec_json(id: &str) -> Value {
    json!({
        "id": id,
        "title": "increment",
        "description": "Return n plus one.",
        "input_shape": "{\"n\": integer}",
        "output_shape": "integer",
        "runner_profile": "py"
    })
}

pub fn project_config(script: &Path) -> ProjectConfig {
    let mut c = ProjectConfig::default();
    c.backends.push(BackendConfig::scripted("scripted", script));
    c.runner_profiles.push(RunnerProfile::new("py", &["python3", "{file}"], ".py"));
    c
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub root: PathBuf,
}

impl Fixture {
    /// Initialized project with the `inc` spec file written next to it.
    pub fn new(script: &Script) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let script_path = dir.path().join("script.json");
        std::fs::write(&script_path, serde_json::to_string(script).unwrap()).unwrap();
        let config_path = dir.path().join("config.json");
        std::fs::write(&config_path, serde_json::to_string(&project_config(&script_path)).unwrap()).unwrap();
        std::fs::write(dir.path().join("inc.json"), spec_json("inc").to_string()).unwrap();
        let root = dir.path().join("proj");
        let f = Fixture { dir, root };
        let out = f.run(&["init", "--config", config_path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        f
    }

    pub fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    pub fn write(&self, name: &str, value: &Value) -> String {
        std::fs::write(self.dir.path().join(name), value.to_string()).unwrap();
        self.path(name)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.run_with_stdin(args, "")
    }

    pub fn run_with_stdin(&self, args: &[&str], stdin: &str) -> Output {
        let mut child = Command::new(BIN)
            .arg("--project")
            .arg(&self.root)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    }

    /// `spec add`, `tests gen`, one correction and approval.
    pub fn approved_inc(&self) {
        for args in [vec!["spec", "add", &self.path("inc.json")], vec!["tests", "gen", "inc"]] {
            let out = self.run(&args);
            assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        }
        let out = self.run_with_stdin(&["tests", "review", "inc"], "mod big {\"expected\": 101}\napprove\n");
        assert!(out.status.success(), "{}", stderr(&out));
    }
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single canonical JSON document a `--json` invocation printed.
pub fn json_doc(o: &Output) -> Value {
    let text = stdout(o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one line on stdout, got {text:?}");
    let doc: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(to_canonical(&doc).unwrap(), lines[0], "stdout is not canonical");
    doc
}
