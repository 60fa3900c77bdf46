//! Operations shared by the command line and the HTTP service.
//!
//! Both front ends call exactly these methods, so a scenario driven through
//! either one leaves the same audit trail. Mutations of one piece (or graph)
//! are serialized: a second concurrent mutation fails with
//! [`ServiceError::Conflict`].

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backend::{Backend, BackendError, Templates};
use crate::compose::{
    execute_graph, localize_fault, run_integration_suite, summarize_failure, validate_graph, ComposeError,
    CompositionGraph, DivergenceReport, FaultReference, IntegrationReport, IntegrationTest, PieceRegistry, TraceRecord,
};
use crate::journal::{actions, new_run_id, refs, Actor, EventDraft, Journal, JournalError};
use crate::model::{validate_spec, CodeCandidate, PieceSpec, TestSuite, Violation};
use crate::review::{FeedbackItem, ReviewBoard, ReviewError, ReviewSession};
use crate::sandbox::{execute_piece, ExecutionResult, RunnerProfile, SandboxError};
use crate::store::{AuditEvent, HistoryFilter, Project, ProjectConfig, StoreError};
use crate::synth::{
    produce_code, produce_pool, IterationSummary, LoopBudget, LoopOutcome, PoolEntry, RunPhase, RunState,
    SynthError, SynthesisRequest,
};

pub const DEFAULT_EXPERT: &str = "expert";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Environment(String),
}

impl ServiceError {
    /// Stable error code used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Invalid(_) => "invalid",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Backend(_) => "backend",
            ServiceError::Environment(_) => "environment",
        }
    }
}

fn joined(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ServiceError::NotFound(e.to_string()),
            StoreError::Immutable(_) => ServiceError::Conflict(e.to_string()),
            _ => ServiceError::Environment(e.to_string()),
        }
    }
}

impl From<JournalError> for ServiceError {
    fn from(e: JournalError) -> Self {
        ServiceError::Environment(e.to_string())
    }
}

impl From<BackendError> for ServiceError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Precondition(_) => ServiceError::Environment(e.to_string()),
            _ => ServiceError::Backend(e.to_string()),
        }
    }
}

impl From<ReviewError> for ServiceError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::SessionOpen(_) | ReviewError::NoSession(_) | ReviewError::Rejected(_) | ReviewError::Suite(_) => {
                ServiceError::Conflict(e.to_string())
            }
            ReviewError::EmptyFeedback | ReviewError::Feedback(_) => ServiceError::Invalid(e.to_string()),
            ReviewError::Backend(b) => b.into(),
            ReviewError::Journal(j) => j.into(),
        }
    }
}

impl From<SynthError> for ServiceError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Precondition(_) => ServiceError::Conflict(e.to_string()),
            _ => ServiceError::Environment(e.to_string()),
        }
    }
}

impl From<ComposeError> for ServiceError {
    fn from(e: ComposeError) -> Self {
        match e {
            ComposeError::Invalid(_) | ComposeError::MissingInput(_) => ServiceError::Invalid(e.to_string()),
            ComposeError::Precondition(_) => ServiceError::Conflict(e.to_string()),
            _ => ServiceError::Environment(e.to_string()),
        }
    }
}

impl From<SandboxError> for ServiceError {
    fn from(e: SandboxError) -> Self {
        match e {
            SandboxError::Input(_) => ServiceError::Invalid(e.to_string()),
            _ => ServiceError::Environment(e.to_string()),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

// ============================================================
// Views
// ============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceView {
    pub spec: PieceSpec,
    pub suite_versions: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approved_version: Option<u32>,
    pub review_open: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<String>,
}

/// Budget overrides accepted by synthesis; absent fields use project defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel_tests: Option<usize>,
    /// Pool mode when greater than 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub candidate_id: String,
    pub passed: bool,
    pub failing_cases: usize,
    pub static_violations: u32,
    pub source_length: usize,
}

impl From<&PoolEntry> for RankedCandidate {
    fn from(p: &PoolEntry) -> Self {
        Self {
            candidate_id: p.candidate.candidate_id.clone(),
            passed: p.report.passed,
            failing_cases: p.report.failing_cases(),
            static_violations: p.static_violations,
            source_length: p.candidate.source.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub run_id: String,
    pub outcome: LoopOutcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranking: Vec<RankedCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Synthesis,
    GraphRun,
    Integration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatusState {
    Running,
    Success,
    Failed,
    Exhausted,
    Stagnated,
}

impl RunStatusState {
    pub fn is_terminal(self) -> bool {
        self != RunStatusState::Running
    }
}

impl From<RunPhase> for RunStatusState {
    fn from(p: RunPhase) -> Self {
        match p {
            RunPhase::Running => RunStatusState::Running,
            RunPhase::Success => RunStatusState::Success,
            RunPhase::Exhausted => RunStatusState::Exhausted,
            RunPhase::Stagnated => RunStatusState::Stagnated,
            RunPhase::BackendError => RunStatusState::Failed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub current: u32,
    pub total: u32,
}

/// What a poll of `runs/{id}` returns. `seq` grows on every change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub kind: RunKind,
    /// Piece id for synthesis, graph id otherwise.
    pub subject: String,
    pub state: RunStatusState,
    pub progress: Progress,
    pub seq: u64,
    #[serde(default)]
    pub iterations: Vec<IterationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl RunStatus {
    fn from_state(state: &RunState) -> Self {
        let phase: RunStatusState = state.phase.into();
        Self {
            run_id: state.run_id.clone(),
            kind: RunKind::Synthesis,
            subject: state.piece_id.clone(),
            state: phase,
            progress: Progress { current: state.iterations.len() as u32, total: state.max_iterations },
            seq: state.iterations.len() as u64 + 1 + u64::from(phase.is_terminal()),
            iterations: state.iterations.clone(),
            winner: state.winner.clone(),
            detail: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphCheck {
    pub graph_id: String,
    pub ok: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRunResult {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Map<String, Value>>,
    pub trace: TraceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeResult {
    pub graph_id: String,
    pub test_id: String,
    pub test_passed: bool,
    /// Run id of the live trace the report refers to.
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<DivergenceReport>,
}

// ============================================================
// Service
// ============================================================

#[derive(Default)]
struct Live {
    runs: HashMap<String, RunStatus>,
    /// Bumped on every run-status change or appended event.
    generation: u64,
}

/// Marks a piece or graph as being mutated; released on drop.
pub struct Claim {
    busy: Arc<Mutex<HashSet<String>>>,
    key: String,
}

impl Drop for Claim {
    fn drop(&mut self) {
        self.busy.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.key);
    }
}

pub struct Service {
    root: PathBuf,
    project: Mutex<Project>,
    busy: Arc<Mutex<HashSet<String>>>,
    live: Mutex<Live>,
    changed: Condvar,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Journal that writes through the shared project and keeps live run
/// statuses current.
struct ServiceJournal<'a> {
    svc: &'a Service,
}

impl Journal for ServiceJournal<'_> {
    fn record(&mut self, event: EventDraft) -> Result<(), JournalError> {
        let r = lock(&self.svc.project).append_event(event).map(|_| ()).map_err(|e| JournalError(e.to_string()));
        self.svc.bump(|_| {});
        r
    }

    fn save_candidate(&mut self, piece_id: &str, candidate: &CodeCandidate, extension: &str) -> Result<(), JournalError> {
        lock(&self.svc.project)
            .put_candidate(piece_id, candidate, extension)
            .map(|_| ())
            .map_err(|e| JournalError(e.to_string()))
    }

    fn save_run_state(&mut self, state: &RunState) -> Result<(), JournalError> {
        lock(&self.svc.project).put_run_state(state).map_err(|e| JournalError(e.to_string()))?;
        self.svc.bump(|live| {
            let seq = live.runs.get(&state.run_id).map_or(0, |s| s.seq) + 1;
            let mut status = RunStatus::from_state(state);
            status.seq = seq;
            live.runs.insert(state.run_id.clone(), status);
        });
        Ok(())
    }

    fn save_trace(&mut self, trace: &TraceRecord) -> Result<(), JournalError> {
        lock(&self.svc.project).put_trace(trace).map_err(|e| JournalError(e.to_string()))
    }
}

struct PreparedSynthesis {
    spec: PieceSpec,
    suite: TestSuite,
    profile: RunnerProfile,
    templates: Templates,
    budget: LoopBudget,
    check_command: Option<Vec<String>>,
    require_clean_static: bool,
    candidates: u32,
    config: ProjectConfig,
}

impl Service {
    pub fn new(project: Project) -> Self {
        Self {
            root: project.root().to_path_buf(),
            project: Mutex::new(project),
            busy: Arc::default(),
            live: Mutex::default(),
            changed: Condvar::new(),
        }
    }

    pub fn open(root: &Path, force: bool) -> ServiceResult<Self> {
        Ok(Self::new(Project::open(root, force)?))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn bump(&self, f: impl FnOnce(&mut Live)) {
        let mut live = lock(&self.live);
        f(&mut live);
        live.generation += 1;
        self.changed.notify_all();
    }

    /// Waits until `ready` holds or `wait` elapses.
    fn wait_for(&self, wait: Duration, mut ready: impl FnMut(&Live) -> bool) {
        let deadline = Instant::now() + wait;
        let mut live = lock(&self.live);
        while !ready(&live) {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            live = self.changed.wait_timeout(live, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    pub fn claim(&self, key: &str) -> ServiceResult<Claim> {
        let mut busy = lock(&self.busy);
        if !busy.insert(key.to_string()) {
            return Err(ServiceError::Conflict(format!("another operation on {key} is in progress")));
        }
        Ok(Claim { busy: Arc::clone(&self.busy), key: key.to_string() })
    }

    fn with_project<R>(&self, f: impl FnOnce(&mut Project) -> Result<R, StoreError>) -> ServiceResult<R> {
        Ok(f(&mut lock(&self.project))?)
    }

    fn journal(&self) -> ServiceJournal<'_> {
        ServiceJournal { svc: self }
    }

    pub fn config(&self) -> ServiceResult<ProjectConfig> {
        self.with_project(|p| p.config())
    }

    fn templates(config: &ProjectConfig) -> ServiceResult<Templates> {
        config.templates().map_err(|e| ServiceError::Environment(format!("project templates: {e}")))
    }

    fn backend(&self, config: &ProjectConfig) -> ServiceResult<Box<dyn Backend>> {
        let cfg = config
            .backend(None)
            .ok_or_else(|| ServiceError::Environment("no backend configured in project.json".into()))?;
        let cursor = self.root.join("backend-state").join(format!("{}.cursor.json", cfg.backend_id));
        Ok(cfg.build(&self.root, Some(cursor))?)
    }

    fn board(&self, piece: &str) -> ServiceResult<ReviewBoard> {
        let mut board = ReviewBoard::new();
        self.with_project(|p| {
            if let Some(s) = p.get_session(piece)? {
                board.restore_session(s);
            }
            match p.latest_approved_suite(piece) {
                Ok(s) => board.restore_approved(s),
                Err(StoreError::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
            Ok(())
        })?;
        Ok(board)
    }

    // ---------------------------------------------------------------- pieces

    pub fn add_spec(&self, spec: PieceSpec) -> ServiceResult<PieceSpec> {
        validate_spec(&spec).map_err(|v| ServiceError::Invalid(joined(&v)))?;
        let _claim = self.claim(&spec.id)?;
        let config = self.config()?;
        if config.profile(&spec.runner_profile).is_none() {
            return Err(ServiceError::Invalid(format!("runner_profile: unknown profile {:?}", spec.runner_profile)));
        }
        let stored = self.with_project(|p| p.put_spec(&spec))?;
        self.bump(|_| {});
        Ok(stored)
    }

    pub fn piece(&self, id: &str) -> ServiceResult<PieceView> {
        self.with_project(|p| {
            let spec = p.get_spec(id)?;
            let mut suite_versions = Vec::new();
            let mut approved_version = None;
            let mut v = 1;
            while let Ok(s) = p.get_suite(id, v) {
                suite_versions.push(v);
                if s.is_approved() {
                    approved_version = Some(v);
                }
                v += 1;
            }
            let review_open = p.get_session(id)?.is_some();
            let selected = p.selected(id).ok().map(|c| c.candidate_id);
            Ok(PieceView { spec, suite_versions, approved_version, review_open, selected })
        })
    }

    pub fn pieces(&self) -> ServiceResult<Vec<PieceView>> {
        let ids = self.with_project(|p| p.list_pieces())?;
        ids.iter().map(|id| self.piece(id)).collect()
    }

    pub fn suite(&self, piece: &str, version: Option<u32>) -> ServiceResult<TestSuite> {
        self.with_project(|p| match version {
            Some(v) => p.get_suite(piece, v),
            None => p.latest_suite(piece),
        })
    }

    // ---------------------------------------------------------------- review

    /// Drafts and explains a suite and opens a review session.
    pub fn start_review(&self, piece: &str) -> ServiceResult<ReviewSession> {
        let _claim = self.claim(piece)?;
        let spec = self.with_project(|p| p.get_spec(piece))?;
        let config = self.config()?;
        let templates = Self::templates(&config)?;
        let mut board = self.board(piece)?;
        if board.session(piece).is_some() {
            return Err(ServiceError::Conflict(format!("a review session is already open for {piece}")));
        }
        let mut backend = self.backend(&config)?;
        let session = board.start_review(&spec, backend.as_mut(), &templates, &mut self.journal())?.clone();
        self.with_project(|p| p.put_session(&session))?;
        Ok(session)
    }

    pub fn review(&self, piece: &str) -> ServiceResult<ReviewSession> {
        self.with_project(|p| p.get_spec(piece))?;
        self.with_project(|p| p.get_session(piece))?
            .ok_or_else(|| ServiceError::NotFound(format!("no open review session for {piece}")))
    }

    pub fn feedback(&self, piece: &str, feedback: Vec<FeedbackItem>, expert: &str) -> ServiceResult<ReviewSession> {
        for item in &feedback {
            item.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        }
        let _claim = self.claim(piece)?;
        let spec = self.with_project(|p| p.get_spec(piece))?;
        let config = self.config()?;
        let templates = Self::templates(&config)?;
        let mut board = self.board(piece)?;
        if board.session(piece).is_none() {
            return Err(ServiceError::Conflict(format!("no open review session for {piece}")));
        }
        let mut backend = self.backend(&config)?;
        let session =
            board.apply_feedback(&spec, feedback, expert, backend.as_mut(), &templates, &mut self.journal())?.clone();
        self.with_project(|p| p.put_session(&session))?;
        Ok(session)
    }

    pub fn approve(&self, piece: &str, approver: &str) -> ServiceResult<TestSuite> {
        let _claim = self.claim(piece)?;
        self.with_project(|p| p.get_spec(piece))?;
        let mut board = self.board(piece)?;
        let suite = board.approve(piece, approver, &mut self.journal())?;
        self.with_project(|p| {
            p.put_suite(&suite)?;
            p.close_session(piece)
        })?;
        Ok(suite)
    }

    // ---------------------------------------------------------------- synthesis

    fn prepare_synthesis(&self, piece: &str, opts: &SynthesisOptions) -> ServiceResult<PreparedSynthesis> {
        let config = self.config()?;
        let spec = self.with_project(|p| p.get_spec(piece))?;
        let suite = match self.with_project(|p| p.latest_approved_suite(piece)) {
            Ok(s) => s,
            Err(ServiceError::NotFound(_)) => {
                return Err(ServiceError::Conflict(format!("{piece} has no approved suite")));
            }
            Err(e) => return Err(e),
        };
        let profile = config
            .profile(&spec.runner_profile)
            .cloned()
            .ok_or_else(|| ServiceError::Environment(format!("unknown runner profile {:?}", spec.runner_profile)))?;
        let mut budget = config.defaults.budget;
        if let Some(n) = opts.max_iterations {
            budget.max_iterations = n;
        }
        if let Some(s) = opts.wall_clock_limit {
            budget.wall_clock_limit = s;
        }
        if let Some(n) = opts.parallel_tests {
            budget.parallel_tests = n;
        }
        budget.validate().map_err(|v| ServiceError::Invalid(v.to_string()))?;
        let candidates = opts.candidates.unwrap_or(config.defaults.candidates);
        if candidates == 0 {
            return Err(ServiceError::Invalid("candidates: must be at least 1".into()));
        }
        Ok(PreparedSynthesis {
            spec,
            suite,
            profile,
            templates: Self::templates(&config)?,
            budget,
            check_command: config.defaults.check_command.clone(),
            require_clean_static: config.defaults.require_clean_static,
            candidates,
            config,
        })
    }

    fn run_prepared(&self, prep: PreparedSynthesis, run_id: String) -> ServiceResult<SynthesisResult> {
        let req = SynthesisRequest {
            run_id: run_id.clone(),
            spec: &prep.spec,
            suite: &prep.suite,
            budget: prep.budget,
            profile: &prep.profile,
            templates: &prep.templates,
            check_command: prep.check_command.clone(),
            require_clean_static: prep.require_clean_static,
        };
        let mut backend = self.backend(&prep.config)?;
        let mut journal = self.journal();
        let (outcome, ranking) = if prep.candidates > 1 {
            let (outcome, pool) = produce_pool(&req, prep.candidates, backend.as_mut(), &mut journal)?;
            (outcome, pool.iter().map(RankedCandidate::from).collect())
        } else {
            (produce_code(&req, backend.as_mut(), &mut journal)?, Vec::new())
        };
        if let Some(w) = &outcome.winner {
            self.with_project(|p| p.set_selected(&prep.spec.id, &w.candidate_id))?;
        }
        let detail = outcome.detail.clone();
        self.bump(|live| {
            if let Some(s) = live.runs.get_mut(&run_id) {
                s.detail = detail;
                s.seq += 1;
            }
        });
        Ok(SynthesisResult { run_id, outcome, ranking })
    }

    /// Runs the repair loop (or pool mode) to completion.
    pub fn synthesize(&self, piece: &str, opts: &SynthesisOptions) -> ServiceResult<SynthesisResult> {
        let _claim = self.claim(piece)?;
        let prep = self.prepare_synthesis(piece, opts)?;
        self.run_prepared(prep, new_run_id())
    }

    /// Starts synthesis on a background thread and returns its run id.
    pub fn start_synthesis(self: &Arc<Self>, piece: &str, opts: &SynthesisOptions) -> ServiceResult<String> {
        let claim = self.claim(piece)?;
        let prep = self.prepare_synthesis(piece, opts)?;
        let run_id = new_run_id();
        let total = if prep.candidates > 1 { prep.candidates } else { prep.budget.max_iterations };
        self.bump(|live| {
            live.runs.insert(
                run_id.clone(),
                RunStatus {
                    run_id: run_id.clone(),
                    kind: RunKind::Synthesis,
                    subject: piece.to_string(),
                    state: RunStatusState::Running,
                    progress: Progress { current: 0, total },
                    seq: 1,
                    iterations: Vec::new(),
                    winner: None,
                    detail: None,
                },
            );
        });
        let svc = Arc::clone(self);
        let id = run_id.clone();
        std::thread::spawn(move || {
            let _claim = claim;
            if let Err(e) = svc.run_prepared(prep, id.clone()) {
                svc.bump(|live| {
                    if let Some(s) = live.runs.get_mut(&id) {
                        s.state = RunStatusState::Failed;
                        s.detail = Some(e.to_string());
                        s.seq += 1;
                    }
                });
            }
        });
        Ok(run_id)
    }

    fn current_run(&self, run_id: &str) -> ServiceResult<RunStatus> {
        if let Some(s) = lock(&self.live).runs.get(run_id) {
            return Ok(s.clone());
        }
        let state = self.with_project(|p| p.get_run_state(run_id))?;
        Ok(RunStatus::from_state(&state))
    }

    /// Current status; with `after_seq`, blocks up to `wait` for a newer one.
    pub fn run_status(&self, run_id: &str, after_seq: Option<u64>, wait: Duration) -> ServiceResult<RunStatus> {
        let status = self.current_run(run_id)?;
        if let Some(after) = after_seq {
            if status.seq <= after && !status.state.is_terminal() {
                self.wait_for(wait, |live| {
                    live.runs.get(run_id).map_or(true, |s| s.seq > after || s.state.is_terminal())
                });
                return self.current_run(run_id);
            }
        }
        Ok(status)
    }

    // ---------------------------------------------------------------- execution

    /// Runs the selected candidate of a piece on one input.
    pub fn run_piece(&self, piece: &str, input: &Value) -> ServiceResult<ExecutionResult> {
        let config = self.config()?;
        let candidate = self.with_project(|p| p.selected(piece))?;
        let profile = config
            .profile(&candidate.runner_profile)
            .ok_or_else(|| ServiceError::Environment(format!("unknown runner profile {:?}", candidate.runner_profile)))?;
        Ok(execute_piece(&candidate, input, profile)?)
    }

    // ---------------------------------------------------------------- graphs

    pub fn graph(&self, graph_id: &str) -> ServiceResult<CompositionGraph> {
        self.with_project(|p| p.get_graph(graph_id))
    }

    /// Stores a graph; unchanged graphs are not re-recorded.
    pub fn put_graph(&self, graph: &CompositionGraph) -> ServiceResult<()> {
        if let Some(v) = crate::model::slug_violation("graph_id", &graph.graph_id) {
            return Err(ServiceError::Invalid(v.to_string()));
        }
        let _claim = self.claim(&format!("graph:{}", graph.graph_id))?;
        if self.graph(&graph.graph_id).ok().as_ref() == Some(graph) {
            return Ok(());
        }
        self.with_project(|p| p.put_graph(graph))?;
        self.bump(|_| {});
        Ok(())
    }

    pub fn integration_tests(&self, graph_id: &str) -> ServiceResult<Vec<IntegrationTest>> {
        self.with_project(|p| p.get_integration_tests(graph_id))
    }

    pub fn put_integration_tests(&self, graph_id: &str, tests: &[IntegrationTest]) -> ServiceResult<()> {
        let graph = self.graph(graph_id)?;
        let mut seen = HashSet::new();
        for t in tests {
            t.validate(&graph).map_err(|v| ServiceError::Invalid(format!("test {}: {}", t.test_id, joined(&v))))?;
            if !seen.insert(&t.test_id) {
                return Err(ServiceError::Invalid(format!("duplicate test id {}", t.test_id)));
            }
        }
        self.with_project(|p| p.put_integration_tests(graph_id, tests))
    }

    fn registry(&self, graph: &CompositionGraph) -> ServiceResult<PieceRegistry> {
        let config = self.config()?;
        let mut reg = PieceRegistry::new();
        for p in &config.runner_profiles {
            reg.add_profile(p.clone());
        }
        self.with_project(|p| {
            for n in &graph.nodes {
                if let Ok(c) = p.get_candidate(&n.piece_id, &n.candidate_id) {
                    reg.add_candidate(c);
                }
                if let Ok(s) = p.latest_approved_suite(&n.piece_id) {
                    reg.add_suite(s);
                }
            }
            Ok(())
        })?;
        Ok(reg)
    }

    pub fn check_graph(&self, graph_id: &str) -> ServiceResult<GraphCheck> {
        let graph = self.graph(graph_id)?;
        let mut violations: Vec<String> = match validate_graph(&graph) {
            Ok(()) => Vec::new(),
            Err(v) => v.iter().map(ToString::to_string).collect(),
        };
        if let Err(v) = self.registry(&graph)?.check_pins(&graph) {
            violations.extend(v.iter().map(ToString::to_string));
        }
        Ok(GraphCheck { graph_id: graph_id.to_string(), ok: violations.is_empty(), violations })
    }

    fn finished_run(&self, run_id: &str, kind: RunKind, subject: &str, ok: bool, nodes: u32, total: u32) {
        self.bump(|live| {
            live.runs.insert(
                run_id.to_string(),
                RunStatus {
                    run_id: run_id.to_string(),
                    kind,
                    subject: subject.to_string(),
                    state: if ok { RunStatusState::Success } else { RunStatusState::Failed },
                    progress: Progress { current: nodes, total },
                    seq: 1,
                    iterations: Vec::new(),
                    winner: None,
                    detail: None,
                },
            );
        });
    }

    /// Executes a graph once and persists its trace.
    pub fn run_graph(&self, graph_id: &str, inputs: &Map<String, Value>) -> ServiceResult<GraphRunResult> {
        let _claim = self.claim(&format!("graph:{graph_id}"))?;
        let graph = self.graph(graph_id)?;
        let registry = self.registry(&graph)?;
        let run = execute_graph(&graph, inputs, &registry)?;
        let run_id = run.trace.run_id.clone();
        let ok = run.outputs.is_some();
        let mut journal = self.journal();
        journal.save_trace(&run.trace)?;
        journal.record(EventDraft::new(
            Actor::System,
            actions::RUN_COMPLETED,
            vec![refs::graph(graph_id), refs::trace(&run_id)],
            json!({
                "run_id": run_id,
                "kind": "graph_run",
                "status": if ok { "success" } else { "failed" },
                "nodes_executed": run.trace.per_node.len(),
            }),
        ))?;
        self.finished_run(&run_id, RunKind::GraphRun, graph_id, ok, run.trace.per_node.len() as u32, graph.nodes.len() as u32);
        Ok(GraphRunResult { run_id, outputs: run.outputs, trace: run.trace })
    }

    pub fn trace(&self, run_id: &str) -> ServiceResult<TraceRecord> {
        self.with_project(|p| p.get_trace(run_id))
    }

    /// Runs the stored integration tests of a graph.
    pub fn integrate(&self, graph_id: &str) -> ServiceResult<IntegrationReport> {
        let _claim = self.claim(&format!("graph:{graph_id}"))?;
        let graph = self.graph(graph_id)?;
        let tests = self.integration_tests(graph_id)?;
        let registry = self.registry(&graph)?;
        let report = run_integration_suite(&graph, &tests, &registry, &mut self.journal())?;
        let run_id = new_run_id();
        let passed = report.results.iter().filter(|r| r.passed).count() as u32;
        self.finished_run(&run_id, RunKind::Integration, graph_id, report.passed(), passed, tests.len() as u32);
        Ok(report)
    }

    /// Runs one integration test and, if it fails, localizes the fault.
    /// Without `reference_run` each node's unit suite is the reference.
    pub fn localize(&self, graph_id: &str, test_id: &str, reference_run: Option<&str>) -> ServiceResult<LocalizeResult> {
        let _claim = self.claim(&format!("graph:{graph_id}"))?;
        let graph = self.graph(graph_id)?;
        let tests = self.integration_tests(graph_id)?;
        let test = tests
            .iter()
            .find(|t| t.test_id == test_id)
            .ok_or_else(|| ServiceError::NotFound(format!("integration test {test_id} of graph {graph_id}")))?;
        let reference = match reference_run {
            Some(id) => Some(self.trace(id)?),
            None => None,
        };
        let config = self.config()?;
        let registry = self.registry(&graph)?;
        let run = execute_graph(&graph, &test.inputs, &registry)?;
        let run_id = run.trace.run_id.clone();
        let passed = test.check(run.outputs.as_ref()).iter().all(|(_, m)| m.matched);
        if passed {
            return Ok(LocalizeResult {
                graph_id: graph_id.into(),
                test_id: test_id.into(),
                test_passed: true,
                run_id,
                report: None,
            });
        }
        let mut journal = self.journal();
        journal.save_trace(&run.trace)?;
        let mode = match &reference {
            Some(t) => FaultReference::Trace(t),
            None => FaultReference::UnitSuites,
        };
        let mut report =
            localize_fault(&graph, test, &run.trace, mode, &registry, config.defaults.budget.parallel_tests)?;
        // The backend summary is advisory; any failure just leaves it out.
        if let Ok(mut backend) = self.backend(&config) {
            let templates = Self::templates(&config)?;
            if let Ok(Some(text)) = summarize_failure(&run.trace, backend.as_mut(), &templates.summarize_failure) {
                report.summary = Some(match report.summary.take() {
                    Some(note) => format!("{note}\n\n{text}"),
                    None => text,
                });
            }
        }
        journal.record(EventDraft::new(
            Actor::System,
            actions::FAULT_LOCALIZED,
            vec![refs::graph(graph_id), refs::trace(&run_id)],
            json!({ "test_id": test_id, "report": report }),
        ))?;
        Ok(LocalizeResult { graph_id: graph_id.into(), test_id: test_id.into(), test_passed: false, run_id, report: Some(report) })
    }

    // ---------------------------------------------------------------- history

    pub fn history(&self, filter: &HistoryFilter) -> ServiceResult<Vec<AuditEvent>> {
        self.with_project(|p| p.read_history(filter))
    }

    /// Payload recorded for an event's `payload_digest`.
    pub fn payload(&self, digest: &str) -> ServiceResult<Value> {
        self.with_project(|p| p.payload(digest))
    }

    /// Events after `after_seq`; waits up to `wait` when there are none yet.
    pub fn events(&self, after_seq: u64, wait: Duration) -> ServiceResult<Vec<AuditEvent>> {
        let filter = HistoryFilter { after_seq: Some(after_seq), ..Default::default() };
        let events = self.history(&filter)?;
        if !events.is_empty() || wait.is_zero() {
            return Ok(events);
        }
        let start = lock(&self.live).generation;
        self.wait_for(wait, |live| live.generation != start);
        self.history(&filter)
    }
}
