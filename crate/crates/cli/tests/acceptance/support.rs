use std::path::{Path, PathBuf};
use std::sync::Mutex;

use pieceforge_core::backend::{BackendConfig, BackendKind, RequestKind, Script};
use pieceforge_core::{PieceSpec, ProjectConfig};
use serde_json::{json, Value};

use crate::piece::{self, Program};
use crate::Check;

/// Every backend configuration handed out to a fixture, for the offline check.
static BACKENDS: Mutex<Vec<BackendKind>> = Mutex::new(Vec::new());

pub fn spec(id: &str) -> PieceSpec {
    PieceSpec {
        id: id.into(),
        title: id.into(),
        description: "Return n plus one.".into(),
        hints: vec![],
        input_shape: "{\"n\": integer}".into(),
        output_shape: "integer".into(),
        runner_profile: piece::PROFILE.into(),
        version: 1,
    }
}

/// Project config with the scripted backend at `script` and the fixture runner.
pub fn config(script: &Path) -> ProjectConfig {
    let backend = BackendConfig::scripted("scripted", script);
    BACKENDS.lock().unwrap().push(backend.kind);
    let mut c = ProjectConfig::default();
    c.backends.push(backend);
    c.runner_profiles.push(piece::profile());
    c
}

/// `n -> n + 1` on 0, 1 and 5, drafted and explained by the backend.
pub fn review_replies(s: &mut Script) {
    let cases: Vec<Value> = [0, 1, 5].iter().map(|n| json!({"case_id": format!("n{n}"), "input": {"n": n}, "expected": n + 1})).collect();
    let per_case: Vec<Value> =
        [0, 1, 5].iter().map(|n| json!({"case_id": format!("n{n}"), "reasoning": format!("{n} plus one")})).collect();
    s.push(RequestKind::GenerateTests, format!("```json\n{}\n```", json!({ "cases": cases })))
        .push(RequestKind::ExplainTests, format!("```json\n{}\n```", json!({ "per_case": per_case })));
}

/// `n + c` as a fixture program.
pub fn add(c: i64) -> Program {
    Program::affine(&[("n", 1)], c, false)
}

/// Script drafting the `inc` suite, then answering with `n + c` for each c.
pub fn inc_script(constants: &[i64]) -> Script {
    let mut s = Script::default();
    review_replies(&mut s);
    for (i, c) in constants.iter().enumerate() {
        let kind = if i == 0 { RequestKind::GenerateCode } else { RequestKind::RepairCode };
        s.push(kind, add(*c).reply());
    }
    s
}

pub fn write_script(dir: &Path, script: &Script) -> PathBuf {
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::to_string(script).unwrap()).unwrap();
    path
}

pub fn offline_completeness() -> Check {
    let kinds = BACKENDS.lock().unwrap().clone();
    if kinds.is_empty() {
        return Err("no fixture recorded its backend".into());
    }
    if let Some(k) = kinds.iter().find(|k| **k != BackendKind::Scripted) {
        return Err(format!("a fixture used a {k:?} backend"));
    }
    // the build has no web UI part: only these crates, none of them wasm or npm driven
    let crates_dir = Path::new(env!("CARGO_MANIFEST_DIR")).parent().unwrap();
    let mut members: Vec<String> = std::fs::read_dir(crates_dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("Cargo.toml").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    members.sort();
    if members != ["cli", "core", "server"] {
        return Err(format!("unexpected workspace members {members:?}"));
    }
    for m in &members {
        let manifest = std::fs::read_to_string(crates_dir.join(m).join("Cargo.toml")).map_err(|e| e.to_string())?;
        if manifest.contains("wasm") || crates_dir.join(m).join("build.rs").exists() {
            return Err(format!("{m} pulls in browser tooling"));
        }
    }
    Ok(format!(
        "{} fixture projects, all on the scripted backend with no HTTP backend configured; members {members:?}",
        kinds.len()
    ))
}
