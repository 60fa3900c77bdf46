use std::time::Instant;

use pieceforge_core::journal::actions;
use pieceforge_core::sandbox::{execute_piece, ExecStatus};
use pieceforge_core::service::{Service, SynthesisOptions};
use pieceforge_core::synth::{rank_candidates, LoopStatus, PoolEntry, SuiteRunReport};
use pieceforge_core::{AuditEvent, CodeCandidate, Project};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use crate::piece::{self, Program};
use crate::support::{config, inc_script, spec, write_script};
use crate::*;

fn fixture_service(dir: &std::path::Path, constants: &[i64]) -> Service {
    let script = write_script(dir, &inc_script(constants));
    let project = Project::init(&dir.join("proj"), &config(&script)).expect("init");
    let svc = Service::new(project);
    svc.add_spec(spec("inc")).expect("spec");
    svc.start_review("inc").expect("review");
    svc.approve("inc", "ann").expect("approve");
    svc
}

pub fn green_loop() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let svc = fixture_service(dir.path(), &[0, 2, 1]);
    let result = svc.synthesize("inc", &SynthesisOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    drop(svc);

    let out = &result.outcome;
    if out.status != LoopStatus::Success || out.iterations.len() != 3 {
        return Err(format!("{:?} after {} iterations", out.status, out.iterations.len()));
    }
    // read the log as written, not through the store
    let root = dir.path().join("proj");
    let text = std::fs::read_to_string(root.join("history.jsonl")).map_err(|e| e.to_string())?;
    let mut indices = Vec::new();
    for line in text.lines() {
        let event: AuditEvent = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if event.action == actions::CANDIDATE_PRODUCED {
            let payload: Value = serde_json::from_str(
                &std::fs::read_to_string(root.join("payloads").join(format!("{}.json", event.payload_digest)))
                    .map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            indices.push(payload["index"].as_u64().unwrap_or(0));
        }
    }
    if indices != [1, 2, 3] {
        return Err(format!("CandidateProduced indices {indices:?}"));
    }
    if elapsed >= GREEN_LOOP_LIMIT {
        return Err(format!("took {:.2}s, limit {:?}", elapsed.as_secs_f64(), GREEN_LOOP_LIMIT));
    }
    Ok(format!(
        "success in 3 iterations, CandidateProduced indices {indices:?}, {:.2}s end to end (limit {}s)",
        elapsed.as_secs_f64(),
        GREEN_LOOP_LIMIT.as_secs()
    ))
}

pub fn budget_exhaustion() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let script = write_script(dir.path(), &inc_script(&[2, 3, 4, 5, 6]));
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string(&config(&script)).unwrap()).map_err(|e| e.to_string())?;
    let spec_path = dir.path().join("inc.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec("inc")).unwrap()).map_err(|e| e.to_string())?;
    let root = dir.path().join("proj");
    let cli = |args: &[&str]| {
        std::process::Command::new(env!("CARGO_BIN_EXE_pieceforge"))
            .arg("--project")
            .arg(&root)
            .args(args)
            .output()
            .expect("spawn cli")
    };
    let budget = EXHAUSTION_BUDGET.to_string();
    let steps: [&[&str]; 4] = [
        &["init", "--config", config_path.to_str().unwrap()],
        &["spec", "add", spec_path.to_str().unwrap()],
        &["tests", "gen", "inc"],
        &["tests", "approve", "inc"],
    ];
    for args in steps {
        let out = cli(args);
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let out = cli(&["--json", "code", "gen", "inc", "--budget", &budget]);
    let doc: Value = serde_json::from_slice(&out.stdout).map_err(|e| format!("stdout: {e}"))?;
    let status = doc["outcome"]["status"].as_str().unwrap_or("?").to_string();
    let iterations = doc["outcome"]["iterations"].as_array().map_or(0, Vec::len);
    let code = out.status.code();
    if status != "exhausted" || iterations != EXHAUSTION_BUDGET as usize || code != Some(1) {
        return Err(format!("status {status}, {iterations} iterations, exit {code:?}"));
    }
    Ok(format!("exhausted after {iterations} iterations, CLI exit 1, detail {}", doc["outcome"]["detail"]))
}

pub fn stagnation_guard() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let svc = fixture_service(dir.path(), &[0, 0, 1]);
    let out = svc.synthesize("inc", &SynthesisOptions::default()).map_err(|e| e.to_string())?.outcome;
    if out.status != LoopStatus::Stagnated || out.iterations.len() != 2 {
        return Err(format!("{:?} after {} iterations", out.status, out.iterations.len()));
    }
    Ok("stagnated at iteration 2".into())
}

pub fn sandbox_bounds() -> Check {
    let profile = piece::profile().with_timeout(SLEEP_TIMEOUT);
    let sleeper = Program::Sleep { secs: 30.0 }.candidate();
    let r = execute_piece(&sleeper, &json!({}), &profile).map_err(|e| e.to_string())?;
    if r.status != ExecStatus::Timeout || r.duration > TIMEOUT_CEILING {
        return Err(format!("sleeper: {:?} after {:.3}s", r.status, r.duration));
    }
    let spew = Program::Spew { bytes: SPEW_BYTES }.candidate();
    let s = execute_piece(&spew, &json!({}), &profile).map_err(|e| e.to_string())?;
    if !s.truncated || s.stdout_raw.len() > profile.max_output_bytes {
        return Err(format!("spew: truncated={} captured {} bytes", s.truncated, s.stdout_raw.len()));
    }
    Ok(format!(
        "timeout after {:.3}s (ceiling {TIMEOUT_CEILING}s); 10 MB output truncated to {} bytes (cap {})",
        r.duration,
        s.stdout_raw.len(),
        profile.max_output_bytes
    ))
}

fn entry(source: &str, passed: bool, static_violations: u32) -> PoolEntry {
    let candidate = CodeCandidate::new(source, piece::PROFILE, 1, "fixture");
    let report = SuiteRunReport { candidate_id: candidate.candidate_id.clone(), per_case: vec![], passed, failures: None };
    PoolEntry { candidate, report, static_violations }
}

pub fn ranking_determinism() -> Check {
    // ties at every level of the key, so each tie-breaker is exercised
    let pool = vec![
        entry("aaaa\n", true, 0),
        entry("bbbb\n", true, 0),
        entry("cc\n", true, 1),
        entry("dddddd\n", false, 0),
        entry("eeeeee\n", false, 0),
        entry("f\n", false, 2),
    ];
    assert_eq!(pool.len(), POOL_SIZE);
    // independent oracle for the expected order
    let mut oracle: Vec<&PoolEntry> = pool.iter().collect();
    oracle.sort_by(|a, b| {
        (!a.report.passed, a.static_violations, a.candidate.source.len(), &a.candidate.candidate_id).cmp(&(
            !b.report.passed,
            b.static_violations,
            b.candidate.source.len(),
            &b.candidate.candidate_id,
        ))
    });
    let expected: Vec<String> = oracle.iter().map(|e| e.candidate.candidate_id.clone()).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(SEED);
    for i in 0..RANKING_PERMUTATIONS {
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut rng);
        if rng.gen_bool(0.5) {
            shuffled.reverse();
        }
        let ranked = rank_candidates(shuffled).map_err(|e| e.to_string())?;
        let ids: Vec<String> = ranked.iter().map(|e| e.candidate.candidate_id.clone()).collect();
        if ids != expected {
            return Err(format!("permutation {i} ranked differently"));
        }
    }
    Ok(format!("{RANKING_PERMUTATIONS} permutations of a {POOL_SIZE}-candidate pool all ranked identically to the oracle order"))
}
