//! The automated code production loop.
//!
//! Iteration 1 asks the backend for code, later iterations ask it to repair
//! the previous candidate given the failure digest. The loop ends at the first
//! passing candidate, when the budget runs out, when the backend repeats a
//! candidate, or when the backend fails.

use std::collections::HashMap;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::backend::{
    canonical_actual, excerpt, generate_code, repair_code, Backend, FailureDigest, FailureEntry, FailureOutcome,
    Templates, STDERR_EXCERPT_LIMIT,
};
use crate::journal::{actions, refs, Actor, EventDraft, Journal, JournalError};
use crate::model::{compare_outputs, CodeCandidate, MatchReport, PieceSpec, TestSuite, Violation};
use crate::sandbox::{execute_piece, ExecStatus, ExecutionResult, RunnerProfile, SandboxError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopBudget {
    pub max_iterations: u32,
    /// Seconds.
    pub wall_clock_limit: f64,
    pub parallel_tests: usize,
}

impl Default for LoopBudget {
    fn default() -> Self {
        Self { max_iterations: 8, wall_clock_limit: 600.0, parallel_tests: 4 }
    }
}

impl LoopBudget {
    pub fn validate(&self) -> Result<(), Violation> {
        if self.max_iterations < 1 {
            Err(Violation::new("max_iterations", "must be at least 1"))
        } else if !(self.wall_clock_limit.is_finite() && self.wall_clock_limit > 0.0) {
            Err(Violation::new("wall_clock_limit", "must be positive"))
        } else if self.parallel_tests < 1 {
            Err(Violation::new("parallel_tests", "must be at least 1"))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl From<SandboxError> for SynthError {
    fn from(e: SandboxError) -> Self {
        SynthError::Configuration(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRun {
    pub case_id: String,
    pub execution: ExecutionResult,
    pub matched: MatchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRunReport {
    pub candidate_id: String,
    pub per_case: Vec<CaseRun>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failures: Option<FailureDigest>,
}

impl SuiteRunReport {
    pub fn failing_cases(&self) -> usize {
        self.per_case.iter().filter(|c| !(c.execution.is_ok() && c.matched.matched)).count()
    }
}

/// Runs every case of an approved suite once against `candidate`.
///
/// Cases run concurrently up to `parallel_tests`; the report keeps suite order.
pub fn run_suite(
    candidate: &CodeCandidate,
    suite: &TestSuite,
    profile: &RunnerProfile,
    parallel_tests: usize,
) -> Result<SuiteRunReport, SynthError> {
    if !suite.is_approved() {
        return Err(SynthError::Precondition(format!("suite is {:?}, expected Approved", suite.state())));
    }
    let cases = suite.cases();
    let slots: Mutex<Vec<Option<Result<ExecutionResult, SandboxError>>>> = Mutex::new((0..cases.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallel_tests.clamp(1, cases.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(case) = cases.get(i) else { break };
                let result = execute_piece(candidate, &case.input, profile);
                slots.lock().expect("slot lock")[i] = Some(result);
            });
        }
    });

    let mut per_case = Vec::with_capacity(cases.len());
    for (case, slot) in cases.iter().zip(slots.into_inner().expect("slot lock")) {
        let execution = slot.expect("every case executed")?;
        if let ExecStatus::SpawnError { detail } = &execution.status {
            return Err(SynthError::Configuration(format!("case {}: cannot start piece: {detail}", case.case_id)));
        }
        let matched = match (&execution.status, &execution.output) {
            (ExecStatus::Ok, Some(output)) => compare_outputs(&case.expected, output, &case.comparison),
            (status, _) => MatchReport::mismatch(format!("status {}", status_name(status))),
        };
        per_case.push(CaseRun { case_id: case.case_id.clone(), execution, matched });
    }
    let entries: Vec<FailureEntry> = per_case.iter().filter_map(failure_entry).collect();
    let passed = entries.is_empty();
    Ok(SuiteRunReport {
        candidate_id: candidate.candidate_id.clone(),
        per_case,
        passed,
        failures: (!passed).then(|| FailureDigest { entries, static_report: None }),
    })
}

fn status_name(status: &ExecStatus) -> String {
    match status {
        ExecStatus::Ok => "ok".into(),
        ExecStatus::NonzeroExit { code } => format!("nonzero_exit({code})"),
        ExecStatus::Timeout => "timeout".into(),
        ExecStatus::MalformedOutput => "malformed_output".into(),
        ExecStatus::SpawnError { .. } => "spawn_error".into(),
    }
}

fn failure_entry(run: &CaseRun) -> Option<FailureEntry> {
    let outcome = match &run.execution.status {
        ExecStatus::Ok if run.matched.matched => return None,
        ExecStatus::Ok => FailureOutcome::WrongOutput,
        ExecStatus::NonzeroExit { .. } | ExecStatus::SpawnError { .. } => FailureOutcome::NonzeroExit,
        ExecStatus::Timeout => FailureOutcome::Timeout,
        ExecStatus::MalformedOutput => FailureOutcome::MalformedOutput,
    };
    let actual = match outcome {
        FailureOutcome::MalformedOutput => Some(excerpt(&run.execution.stdout_raw, STDERR_EXCERPT_LIMIT)),
        _ => run.execution.output.as_ref().and_then(canonical_actual),
    };
    Some(FailureEntry {
        case_id: run.case_id.clone(),
        outcome,
        actual,
        stderr_excerpt: excerpt(&run.execution.stderr_raw, STDERR_EXCERPT_LIMIT),
    })
}

// ============================================================
// Static checks
// ============================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticReport {
    pub violations: u32,
    pub report: String,
}

/// Runs an external checker on the candidate source. No command means the
/// check is disabled and reports zero violations.
///
/// Violations are the non-empty output lines; a silent nonzero exit counts as one.
pub fn static_checks(
    candidate: &CodeCandidate,
    check_command: Option<&[String]>,
    file_extension: &str,
) -> Result<StaticReport, SynthError> {
    let Some(template) = check_command else {
        return Ok(StaticReport { violations: 0, report: String::new() });
    };
    if template.is_empty() {
        return Err(SynthError::Configuration("check command is empty".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| SynthError::Configuration(e.to_string()))?;
    let file = dir.path().join(format!("piece{file_extension}"));
    std::fs::write(&file, &candidate.source).map_err(|e| SynthError::Configuration(e.to_string()))?;
    let path = file.to_string_lossy();
    let argv: Vec<String> = template.iter().map(|a| a.replace("{file}", &path)).collect();
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(dir.path())
        .output()
        .map_err(|e| SynthError::Configuration(format!("static check {}: {e}", argv[0])))?;
    let mut report = String::from_utf8_lossy(&output.stdout).into_owned();
    report.push_str(&String::from_utf8_lossy(&output.stderr));
    let lines = report.lines().filter(|l| !l.trim().is_empty()).count() as u32;
    let violations = if lines == 0 && !output.status.success() { 1 } else { lines };
    Ok(StaticReport { violations, report: excerpt(report.as_bytes(), STDERR_EXCERPT_LIMIT) })
}

// ============================================================
// Ranking
// ============================================================

/// Candidates order by: passing first, fewer static violations, shorter
/// source, then candidate id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingKey {
    pub passes_all: bool,
    pub static_violations: u32,
    pub source_length: usize,
    pub candidate_id: String,
}

impl Ord for RankingKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .passes_all
            .cmp(&self.passes_all)
            .then(self.static_violations.cmp(&other.static_violations))
            .then(self.source_length.cmp(&other.source_length))
            .then_with(|| self.candidate_id.cmp(&other.candidate_id))
    }
}

impl PartialOrd for RankingKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub candidate: CodeCandidate,
    pub report: SuiteRunReport,
    pub static_violations: u32,
}

impl PoolEntry {
    pub fn key(&self) -> RankingKey {
        RankingKey {
            passes_all: self.report.passed,
            static_violations: self.static_violations,
            source_length: self.candidate.source.len(),
            candidate_id: self.candidate.candidate_id.clone(),
        }
    }
}

pub fn rank_candidates(mut pool: Vec<PoolEntry>) -> Result<Vec<PoolEntry>, SynthError> {
    if pool.is_empty() {
        return Err(SynthError::Precondition("candidate pool is empty".into()));
    }
    pool.sort_by_cached_key(PoolEntry::key);
    Ok(pool)
}

// ============================================================
// The loop
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Success,
    Exhausted,
    Stagnated,
    BackendError,
}

impl LoopStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopStatus::Success => "success",
            LoopStatus::Exhausted => "exhausted",
            LoopStatus::Stagnated => "stagnated",
            LoopStatus::BackendError => "backend_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairIteration {
    pub index: u32,
    pub candidate_id: String,
    pub report: SuiteRunReport,
    pub static_violations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub status: LoopStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<CodeCandidate>,
    pub iterations: Vec<RepairIteration>,
    /// Seconds.
    pub total_duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl LoopOutcome {
    pub fn last_failures(&self) -> Option<&FailureDigest> {
        self.iterations.last().and_then(|i| i.report.failures.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Running,
    Success,
    Exhausted,
    Stagnated,
    BackendError,
}

impl From<LoopStatus> for RunPhase {
    fn from(s: LoopStatus) -> Self {
        match s {
            LoopStatus::Success => RunPhase::Success,
            LoopStatus::Exhausted => RunPhase::Exhausted,
            LoopStatus::Stagnated => RunPhase::Stagnated,
            LoopStatus::BackendError => RunPhase::BackendError,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: u32,
    pub candidate_id: String,
    pub passed: bool,
    pub case_results: Vec<(String, bool)>,
    pub static_violations: u32,
}

/// Persisted progress of one synthesis run (`runs/<run-id>/state.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub piece_id: String,
    pub suite_version: u32,
    pub phase: RunPhase,
    pub max_iterations: u32,
    pub iterations: Vec<IterationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_failures: Option<FailureDigest>,
}

/// Inputs of one synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisRequest<'a> {
    pub run_id: String,
    pub spec: &'a PieceSpec,
    pub suite: &'a TestSuite,
    pub budget: LoopBudget,
    pub profile: &'a RunnerProfile,
    pub templates: &'a Templates,
    pub check_command: Option<Vec<String>>,
    /// Treat a candidate with static violations as failing.
    pub require_clean_static: bool,
}

struct LoopState<'r, 'a> {
    req: &'r SynthesisRequest<'a>,
    started: Instant,
    iterations: Vec<RepairIteration>,
    state: RunState,
}

impl LoopState<'_, '_> {
    fn record(
        &mut self,
        journal: &mut dyn Journal,
        backend_id: &str,
        candidate: &CodeCandidate,
        report: SuiteRunReport,
        static_violations: u32,
    ) -> Result<(), SynthError> {
        let index = self.iterations.len() as u32 + 1;
        let piece = &self.req.spec.id;
        journal.save_candidate(piece, candidate, &self.req.profile.file_extension)?;
        journal.record(EventDraft::new(
            Actor::Backend(backend_id.to_string()),
            actions::CANDIDATE_PRODUCED,
            vec![refs::candidate(piece, &candidate.candidate_id), refs::suite(piece, self.req.suite.suite_version())],
            json!({
                "run_id": self.req.run_id,
                "index": index,
                "candidate_id": candidate.candidate_id,
                "passed": report.passed,
                "static_violations": static_violations,
            }),
        ))?;
        self.state.iterations.push(IterationSummary {
            index,
            candidate_id: candidate.candidate_id.clone(),
            passed: report.passed,
            case_results: report
                .per_case
                .iter()
                .map(|c| (c.case_id.clone(), c.execution.is_ok() && c.matched.matched))
                .collect(),
            static_violations,
        });
        self.state.last_failures = report.failures.clone();
        journal.save_run_state(&self.state)?;
        info!(run = %self.req.run_id, index, passed = report.passed, "iteration finished");
        self.iterations.push(RepairIteration {
            index,
            candidate_id: candidate.candidate_id.clone(),
            report,
            static_violations,
        });
        Ok(())
    }

    fn finish(
        mut self,
        journal: &mut dyn Journal,
        status: LoopStatus,
        winner: Option<CodeCandidate>,
        detail: Option<String>,
    ) -> Result<LoopOutcome, SynthError> {
        self.state.phase = status.into();
        self.state.winner = winner.as_ref().map(|w| w.candidate_id.clone());
        let piece = &self.req.spec.id;
        let mut run_refs = vec![refs::suite(piece, self.req.suite.suite_version())];
        if let Some(w) = &winner {
            run_refs.push(refs::candidate(piece, &w.candidate_id));
        }
        journal.record(EventDraft::new(
            Actor::System,
            actions::RUN_COMPLETED,
            run_refs,
            json!({
                "run_id": self.req.run_id,
                "kind": "synthesis",
                "status": status.as_str(),
                "iterations": self.iterations.len(),
                "detail": detail,
            }),
        ))?;
        // terminal state last, so a poller that sees it also sees the event
        journal.save_run_state(&self.state)?;
        Ok(LoopOutcome {
            status,
            winner,
            iterations: self.iterations,
            total_duration: self.started.elapsed().as_secs_f64(),
            detail,
        })
    }
}

fn check_request(req: &SynthesisRequest<'_>) -> Result<(), SynthError> {
    if !req.suite.is_approved() {
        return Err(SynthError::Precondition(format!("suite is {:?}, expected Approved", req.suite.state())));
    }
    req.budget.validate().map_err(|v| SynthError::Precondition(v.to_string()))?;
    if req.spec.runner_profile != req.profile.name {
        return Err(SynthError::Configuration(format!(
            "piece uses runner profile {:?} but {:?} was supplied",
            req.spec.runner_profile, req.profile.name
        )));
    }
    Ok(())
}

fn new_state(req: &SynthesisRequest<'_>) -> RunState {
    RunState {
        run_id: req.run_id.clone(),
        piece_id: req.spec.id.clone(),
        suite_version: req.suite.suite_version(),
        phase: RunPhase::Running,
        max_iterations: req.budget.max_iterations,
        iterations: Vec::new(),
        winner: None,
        last_failures: None,
    }
}

/// Generate, test, repair until the suite passes or the budget is spent.
pub fn produce_code(
    req: &SynthesisRequest<'_>,
    backend: &mut dyn Backend,
    journal: &mut dyn Journal,
) -> Result<LoopOutcome, SynthError> {
    check_request(req)?;
    let mut st = LoopState { req, started: Instant::now(), iterations: Vec::new(), state: new_state(req) };
    journal.save_run_state(&st.state)?;
    let wall_limit = Duration::from_secs_f64(req.budget.wall_clock_limit);
    let mut seen: HashMap<String, (SuiteRunReport, u32)> = HashMap::new();
    let mut previous: Option<(CodeCandidate, FailureDigest)> = None;
    let backend_id = backend.backend_id().to_string();

    for index in 1..=req.budget.max_iterations {
        if index > 1 && st.started.elapsed() >= wall_limit {
            let detail = format!("wall clock limit reached after {} iterations", index - 1);
            return st.finish(journal, LoopStatus::Exhausted, None, Some(detail));
        }
        let produced = match &previous {
            None => generate_code(req.spec, req.suite, &req.templates.generate_code, backend, index),
            Some((prev, digest)) => {
                repair_code(req.spec, req.suite, prev, digest, &req.templates.repair_code, backend, index)
            }
        };
        let candidate = match produced {
            Ok(c) => c,
            Err(e) => return st.finish(journal, LoopStatus::BackendError, None, Some(e.to_string())),
        };

        if let Some((report, violations)) = seen.get(&candidate.candidate_id).cloned() {
            st.record(journal, &backend_id, &candidate, report, violations)?;
            let detail = format!("candidate {} repeated at iteration {index}", short(&candidate.candidate_id));
            return st.finish(journal, LoopStatus::Stagnated, None, Some(detail));
        }

        let mut report = run_suite(&candidate, req.suite, req.profile, req.budget.parallel_tests)?;
        let checks = static_checks(&candidate, req.check_command.as_deref(), &req.profile.file_extension)?;
        if req.require_clean_static && checks.violations > 0 {
            report.passed = false;
            let digest = report.failures.get_or_insert_with(FailureDigest::default);
            digest.static_report = Some(checks.report.clone());
        }
        let passed = report.passed;
        let digest = report.failures.clone().unwrap_or_default();
        seen.insert(candidate.candidate_id.clone(), (report.clone(), checks.violations));
        st.record(journal, &backend_id, &candidate, report, checks.violations)?;
        if passed {
            return st.finish(journal, LoopStatus::Success, Some(candidate), None);
        }
        previous = Some((candidate, digest));
    }
    let detail = format!("exhausted after {} iterations", req.budget.max_iterations);
    st.finish(journal, LoopStatus::Exhausted, None, Some(detail))
}

/// Pool mode: `count` independent generations, ranked; the best passing
/// candidate wins.
pub fn produce_pool(
    req: &SynthesisRequest<'_>,
    count: u32,
    backend: &mut dyn Backend,
    journal: &mut dyn Journal,
) -> Result<(LoopOutcome, Vec<PoolEntry>), SynthError> {
    check_request(req)?;
    if count == 0 {
        return Err(SynthError::Precondition("candidate count must be at least 1".into()));
    }
    let mut st = LoopState { req, started: Instant::now(), iterations: Vec::new(), state: new_state(req) };
    st.state.max_iterations = count;
    let backend_id = backend.backend_id().to_string();
    let mut pool = Vec::new();
    for index in 1..=count {
        let candidate = match generate_code(req.spec, req.suite, &req.templates.generate_code, backend, index) {
            Ok(c) => c,
            Err(e) if pool.is_empty() => {
                let outcome = st.finish(journal, LoopStatus::BackendError, None, Some(e.to_string()))?;
                return Ok((outcome, pool));
            }
            Err(_) => break,
        };
        let report = run_suite(&candidate, req.suite, req.profile, req.budget.parallel_tests)?;
        let checks = static_checks(&candidate, req.check_command.as_deref(), &req.profile.file_extension)?;
        st.record(journal, &backend_id, &candidate, report.clone(), checks.violations)?;
        if !pool.iter().any(|p: &PoolEntry| p.candidate.candidate_id == candidate.candidate_id) {
            pool.push(PoolEntry { candidate, report, static_violations: checks.violations });
        }
    }
    let ranked = rank_candidates(pool)?;
    let best = &ranked[0];
    let clean = !req.require_clean_static || best.static_violations == 0;
    let outcome = if best.report.passed && clean {
        st.finish(journal, LoopStatus::Success, Some(best.candidate.clone()), None)?
    } else {
        st.finish(journal, LoopStatus::Exhausted, None, Some(format!("no passing candidate among {count}")))?
    };
    Ok((outcome, ranked))
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}
