//! On-disk project layout, content-addressed artifacts and the audit log.
//!
//! ```text
//! project.json        configuration (backends, runner profiles, templates, defaults)
//! history.jsonl       one canonical AuditEvent per line
//! specs/<piece>/      spec.json, versions/, suites/, candidates/, review.json, selected.json
//! graphs/<id>.json    composition graphs (+ <id>.tests.json integration tests)
//! runs/<run-id>/      state.json, trace.json
//! payloads/<digest>.json   canonical payloads referenced by audit events
//! ```
//!
//! Every JSON file is written in canonical form via write-temp-then-rename.
//! A lock file holding the writer's pid guarantees a single writer.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendConfig, PromptTemplate, RequestKind, Templates};
use crate::compose::{CompositionGraph, IntegrationTest, TraceRecord};
use crate::journal::{actions, refs, Actor, EventDraft, Journal, JournalError};
use crate::model::{to_canonical, value_digest, CodeCandidate, PieceSpec, TestSuite};
use crate::review::ReviewSession;
use crate::sandbox::RunnerProfile;
use crate::synth::{LoopBudget, RunState};

pub const PROJECT_FILE: &str = "project.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const LOCK_FILE: &str = "project.lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not empty")]
    NotEmpty(PathBuf),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("project is locked by running process {0}")]
    Locked(u32),
    #[error("stale lock left by dead process {0}; reopen with force to reclaim")]
    StaleLock(u32),
    #[error("corrupt history at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("{0} is write-once and already stored with different content")]
    Immutable(String),
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("project is open read-only")]
    ReadOnly,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

// ============================================================
// Configuration
// ============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectDefaults {
    #[serde(default)]
    pub budget: LoopBudget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_command: Option<Vec<String>>,
    #[serde(default)]
    pub require_clean_static: bool,
    #[serde(default = "default_candidates")]
    pub candidates: u32,
}

fn default_candidates() -> u32 {
    1
}

impl Default for ProjectDefaults {
    fn default() -> Self {
        Self { budget: LoopBudget::default(), check_command: None, require_clean_static: false, candidates: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub version: u32,
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub runner_profiles: Vec<RunnerProfile>,
    /// Template body overrides keyed by request kind (`generate_tests`, ...).
    #[serde(default)]
    pub templates: BTreeMap<String, String>,
    #[serde(default)]
    pub defaults: ProjectDefaults,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            version: 1,
            backends: Vec::new(),
            runner_profiles: Vec::new(),
            templates: BTreeMap::new(),
            defaults: ProjectDefaults::default(),
        }
    }
}

impl ProjectConfig {
    pub fn templates(&self) -> Result<Templates, String> {
        let mut t = Templates::default();
        for (name, body) in &self.templates {
            let kind: RequestKind = serde_json::from_value(Value::String(name.clone()))
                .map_err(|_| format!("unknown template {name:?}"))?;
            let slot = match kind {
                RequestKind::GenerateTests => &mut t.generate_tests,
                RequestKind::ExplainTests => &mut t.explain_tests,
                RequestKind::ReviseTests => &mut t.revise_tests,
                RequestKind::GenerateCode => &mut t.generate_code,
                RequestKind::RepairCode => &mut t.repair_code,
                RequestKind::SummarizeFailure => &mut t.summarize_failure,
            };
            *slot = PromptTemplate::new(name.clone(), body.clone());
        }
        t.validate().map_err(|v| v.to_string())?;
        Ok(t)
    }

    pub fn profile(&self, name: &str) -> Option<&RunnerProfile> {
        self.runner_profiles.iter().find(|p| p.name == name)
    }

    pub fn backend(&self, id: Option<&str>) -> Option<&BackendConfig> {
        match id {
            Some(id) => self.backends.iter().find(|b| b.backend_id == id),
            None => self.backends.first(),
        }
    }
}

// ============================================================
// Audit events
// ============================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub actor: Actor,
    pub action: String,
    pub refs: Vec<String>,
    pub payload_digest: String,
}

#[derive(Debug, Clone, Default)]
pub struct HistoryFilter {
    pub piece: Option<String>,
    pub action: Option<String>,
    pub after_seq: Option<u64>,
}

impl HistoryFilter {
    pub fn piece(piece: &str) -> Self {
        Self { piece: Some(piece.to_string()), ..Default::default() }
    }

    pub fn action(action: &str) -> Self {
        Self { action: Some(action.to_string()), ..Default::default() }
    }

    fn accepts(&self, e: &AuditEvent) -> bool {
        self.piece.as_ref().map_or(true, |p| e.refs.iter().any(|r| refs::mentions_piece(r, p)))
            && self.action.as_ref().map_or(true, |a| &e.action == a)
            && self.after_seq.map_or(true, |s| e.seq > s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Spec,
    Suite,
    Candidate,
    Graph,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    /// Piece id, graph id, run id, or `piece/hash` for candidates.
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
}

// ============================================================
// Locking
// ============================================================

#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn process_alive(pid: u32) -> bool {
    // SAFETY: signal 0 performs only the existence/permission check.
    let rc = unsafe { libc::kill(pid as i32, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

fn acquire_lock(root: &Path, force: bool) -> Result<LockGuard, StoreError> {
    let path = root.join(LOCK_FILE);
    for _ in 0..2 {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                write!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                return Ok(LockGuard { path });
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let text = fs::read_to_string(&path).unwrap_or_default();
                let pid: u32 = text.trim().parse().unwrap_or(0);
                if pid != 0 && process_alive(pid) {
                    return Err(StoreError::Locked(pid));
                }
                if !force {
                    return Err(StoreError::StaleLock(pid));
                }
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    Err(StoreError::Locked(0))
}

// ============================================================
// Project
// ============================================================

#[derive(Debug)]
pub struct Project {
    root: PathBuf,
    lock: Option<LockGuard>,
    next_seq: u64,
}

/// Writes `bytes` atomically next to `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("artifact paths have parents");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

fn canonical_bytes<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<Vec<u8>, StoreError> {
    to_canonical(v)
        .map(String::into_bytes)
        .map_err(|e| StoreError::Format { path: path.to_path_buf(), detail: e.to_string() })
}

impl Project {
    /// Creates the project layout in an empty or missing directory.
    pub fn init(path: &Path, config: &ProjectConfig) -> Result<Self, StoreError> {
        if path.exists() {
            let mut entries = fs::read_dir(path).map_err(io_err(path))?;
            if entries.next().is_some() {
                return Err(StoreError::NotEmpty(path.to_path_buf()));
            }
        }
        fs::create_dir_all(path).map_err(io_err(path))?;
        let lock = acquire_lock(path, false)?;
        for dir in ["specs", "graphs", "runs", "payloads"] {
            let d = path.join(dir);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let history = path.join(HISTORY_FILE);
        File::create(&history).map_err(io_err(&history))?;
        let project = Self { root: path.to_path_buf(), lock: Some(lock), next_seq: 1 };
        project.save_config(config)?;
        Ok(project)
    }

    /// Opens an existing project for writing.
    pub fn open(path: &Path, force: bool) -> Result<Self, StoreError> {
        Self::check_layout(path)?;
        let lock = acquire_lock(path, force)?;
        let mut project = Self { root: path.to_path_buf(), lock: Some(lock), next_seq: 1 };
        project.next_seq = project.read_history(&HistoryFilter::default())?.last().map_or(1, |e| e.seq + 1);
        Ok(project)
    }

    /// Opens without taking the writer lock; writes are refused.
    pub fn open_read_only(path: &Path) -> Result<Self, StoreError> {
        Self::check_layout(path)?;
        Ok(Self { root: path.to_path_buf(), lock: None, next_seq: 0 })
    }

    fn check_layout(path: &Path) -> Result<(), StoreError> {
        let config = path.join(PROJECT_FILE);
        if !config.is_file() {
            return Err(StoreError::NotFound(format!("{} (not a project)", config.display())));
        }
        Ok(())
    }

    /// Walks up from `start` to the nearest directory holding `project.json`.
    pub fn discover(start: &Path) -> Option<PathBuf> {
        start.ancestors().find(|d| d.join(PROJECT_FILE).is_file()).map(Path::to_path_buf)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn writable(&self) -> Result<(), StoreError> {
        if self.lock.is_some() {
            Ok(())
        } else {
            Err(StoreError::ReadOnly)
        }
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path, what: &str) -> Result<T, StoreError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(what.to_string())),
            Err(e) => return Err(io_err(path)(e)),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Format { path: path.to_path_buf(), detail: e.to_string() })
    }

    fn write_json<T: Serialize + ?Sized>(&self, path: &Path, v: &T) -> Result<(), StoreError> {
        self.writable()?;
        write_atomic(path, &canonical_bytes(path, v)?)
    }

    /// Write-once: identical content is a no-op, different content is refused.
    fn write_once(&self, path: &Path, bytes: &[u8], what: &str) -> Result<(), StoreError> {
        self.writable()?;
        match fs::read(path) {
            Ok(existing) if existing == bytes => Ok(()),
            Ok(_) => Err(StoreError::Immutable(what.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => write_atomic(path, bytes),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    // ---------------------------------------------------------------- config

    pub fn config(&self) -> Result<ProjectConfig, StoreError> {
        self.read_json(&self.root.join(PROJECT_FILE), PROJECT_FILE)
    }

    pub fn save_config(&self, config: &ProjectConfig) -> Result<(), StoreError> {
        self.write_json(&self.root.join(PROJECT_FILE), config)
    }

    // ---------------------------------------------------------------- paths

    fn piece_dir(&self, piece: &str) -> PathBuf {
        self.root.join("specs").join(piece)
    }

    pub fn candidate_path(&self, piece: &str, candidate_id: &str, extension: &str) -> PathBuf {
        self.piece_dir(piece).join("candidates").join(format!("{candidate_id}{extension}"))
    }

    fn suite_path(&self, piece: &str, version: u32) -> PathBuf {
        self.piece_dir(piece).join("suites").join(format!("{version}.json"))
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    // ---------------------------------------------------------------- specs

    /// Stores a spec as the next version of its piece. Re-adding identical
    /// content returns the current version unchanged.
    pub fn put_spec(&mut self, spec: &PieceSpec) -> Result<PieceSpec, StoreError> {
        self.writable()?;
        let mut stored = spec.clone();
        match self.get_spec(&spec.id) {
            Ok(current) => {
                stored.version = current.version;
                if stored == current {
                    return Ok(current);
                }
                stored.version = current.version + 1;
            }
            Err(StoreError::NotFound(_)) => stored.version = 1,
            Err(e) => return Err(e),
        }
        let dir = self.piece_dir(&spec.id);
        self.write_json(&dir.join("versions").join(format!("{}.json", stored.version)), &stored)?;
        self.write_json(&dir.join("spec.json"), &stored)?;
        self.append_event(EventDraft::new(
            Actor::Expert("expert".into()),
            actions::SPEC_ADDED,
            vec![refs::spec(&stored.id, stored.version)],
            serde_json::to_value(&stored).unwrap_or(Value::Null),
        ))?;
        Ok(stored)
    }

    pub fn get_spec(&self, piece: &str) -> Result<PieceSpec, StoreError> {
        self.read_json(&self.piece_dir(piece).join("spec.json"), &format!("spec {piece}"))
    }

    pub fn get_spec_version(&self, piece: &str, version: u32) -> Result<PieceSpec, StoreError> {
        self.read_json(
            &self.piece_dir(piece).join("versions").join(format!("{version}.json")),
            &format!("spec {piece}@{version}"),
        )
    }

    pub fn list_pieces(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("specs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().join("spec.json").is_file() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    // ---------------------------------------------------------------- suites

    /// Approved suites are write-once.
    pub fn put_suite(&self, suite: &TestSuite) -> Result<PathBuf, StoreError> {
        let path = self.suite_path(suite.piece_id(), suite.suite_version());
        let what = format!("suite {}@{}", suite.piece_id(), suite.suite_version());
        if let Ok(existing) = self.read_json::<TestSuite>(&path, &what) {
            if existing.is_approved() {
                return self.write_once(&path, &canonical_bytes(&path, suite)?, &what).map(|_| path);
            }
        }
        self.write_json(&path, suite)?;
        Ok(path)
    }

    pub fn get_suite(&self, piece: &str, version: u32) -> Result<TestSuite, StoreError> {
        self.read_json(&self.suite_path(piece, version), &format!("suite {piece}@{version}"))
    }

    fn suite_versions(&self, piece: &str) -> Result<Vec<u32>, StoreError> {
        let dir = self.piece_dir(piece).join("suites");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut versions: Vec<u32> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".json")?.parse().ok())
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn latest_suite(&self, piece: &str) -> Result<TestSuite, StoreError> {
        let v = *self.suite_versions(piece)?.last().ok_or_else(|| StoreError::NotFound(format!("suite for {piece}")))?;
        self.get_suite(piece, v)
    }

    pub fn latest_approved_suite(&self, piece: &str) -> Result<TestSuite, StoreError> {
        for v in self.suite_versions(piece)?.into_iter().rev() {
            let s = self.get_suite(piece, v)?;
            if s.is_approved() {
                return Ok(s);
            }
        }
        Err(StoreError::NotFound(format!("approved suite for {piece}")))
    }

    // ---------------------------------------------------------------- review sessions

    pub fn put_session(&self, session: &ReviewSession) -> Result<(), StoreError> {
        self.put_suite(&session.current_suite)?;
        self.write_json(&self.piece_dir(&session.piece_id).join("review.json"), session)
    }

    pub fn get_session(&self, piece: &str) -> Result<Option<ReviewSession>, StoreError> {
        match self.read_json(&self.piece_dir(piece).join("review.json"), "review session") {
            Ok(s) => Ok(Some(s)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn close_session(&self, piece: &str) -> Result<(), StoreError> {
        self.writable()?;
        let path = self.piece_dir(piece).join("review.json");
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    // ---------------------------------------------------------------- candidates

    /// Stores the source under its content hash plus a metadata record.
    pub fn put_candidate(&self, piece: &str, candidate: &CodeCandidate, extension: &str) -> Result<PathBuf, StoreError> {
        let path = self.candidate_path(piece, &candidate.candidate_id, extension);
        let what = format!("candidate {}", candidate.candidate_id);
        self.write_once(&path, candidate.source.as_bytes(), &what)?;
        let meta = self.piece_dir(piece).join("candidates").join(format!("{}.meta.json", candidate.candidate_id));
        if !meta.exists() {
            let mut stored = candidate.clone();
            stored.source.clear();
            self.write_json(&meta, &stored)?;
        }
        Ok(path)
    }

    pub fn get_candidate(&self, piece: &str, candidate_id: &str) -> Result<CodeCandidate, StoreError> {
        let dir = self.piece_dir(piece).join("candidates");
        let what = format!("candidate {candidate_id}");
        let mut meta: CodeCandidate = self.read_json(&dir.join(format!("{candidate_id}.meta.json")), &what)?;
        let config = self.config()?;
        let ext = config.profile(&meta.runner_profile).map(|p| p.file_extension.clone()).unwrap_or_default();
        let src_path = dir.join(format!("{candidate_id}{ext}"));
        meta.source = fs::read_to_string(&src_path).map_err(|_| StoreError::NotFound(what))?;
        Ok(meta)
    }

    pub fn set_selected(&self, piece: &str, candidate_id: &str) -> Result<(), StoreError> {
        self.write_json(&self.piece_dir(piece).join("selected.json"), &serde_json::json!({ "candidate_id": candidate_id }))
    }

    pub fn selected(&self, piece: &str) -> Result<CodeCandidate, StoreError> {
        let v: Value = self.read_json(&self.piece_dir(piece).join("selected.json"), &format!("selected candidate for {piece}"))?;
        let id = v["candidate_id"].as_str().ok_or_else(|| StoreError::NotFound(format!("selected candidate for {piece}")))?;
        self.get_candidate(piece, id)
    }

    // ---------------------------------------------------------------- graphs

    pub fn put_graph(&mut self, graph: &CompositionGraph) -> Result<(), StoreError> {
        let path = self.root.join("graphs").join(format!("{}.json", graph.graph_id));
        self.write_json(&path, graph)?;
        self.append_event(EventDraft::new(
            Actor::Expert("expert".into()),
            actions::GRAPH_UPDATED,
            vec![refs::graph(&graph.graph_id)],
            serde_json::to_value(graph).unwrap_or(Value::Null),
        ))?;
        Ok(())
    }

    pub fn get_graph(&self, graph_id: &str) -> Result<CompositionGraph, StoreError> {
        self.read_json(&self.root.join("graphs").join(format!("{graph_id}.json")), &format!("graph {graph_id}"))
    }

    pub fn put_integration_tests(&self, graph_id: &str, tests: &[IntegrationTest]) -> Result<(), StoreError> {
        self.write_json(&self.root.join("graphs").join(format!("{graph_id}.tests.json")), tests)
    }

    pub fn get_integration_tests(&self, graph_id: &str) -> Result<Vec<IntegrationTest>, StoreError> {
        match self.read_json(&self.root.join("graphs").join(format!("{graph_id}.tests.json")), "integration tests") {
            Err(StoreError::NotFound(_)) => Ok(Vec::new()),
            other => other,
        }
    }

    // ---------------------------------------------------------------- runs

    pub fn put_run_state(&self, state: &RunState) -> Result<(), StoreError> {
        self.write_json(&self.run_dir(&state.run_id).join("state.json"), state)
    }

    pub fn get_run_state(&self, run_id: &str) -> Result<RunState, StoreError> {
        self.read_json(&self.run_dir(run_id).join("state.json"), &format!("run {run_id}"))
    }

    pub fn put_trace(&self, trace: &TraceRecord) -> Result<(), StoreError> {
        self.write_json(&self.run_dir(&trace.run_id).join("trace.json"), trace)
    }

    pub fn get_trace(&self, run_id: &str) -> Result<TraceRecord, StoreError> {
        self.read_json(&self.run_dir(run_id).join("trace.json"), &format!("trace {run_id}"))
    }

    /// Raw stored bytes of an artifact.
    pub fn get_artifact(&self, r: &ArtifactRef) -> Result<Vec<u8>, StoreError> {
        let path = match r.kind {
            ArtifactKind::Spec => match r.version {
                Some(v) => self.piece_dir(&r.id).join("versions").join(format!("{v}.json")),
                None => self.piece_dir(&r.id).join("spec.json"),
            },
            ArtifactKind::Suite => {
                let v = r.version.ok_or_else(|| StoreError::NotFound("suite reference without version".into()))?;
                self.suite_path(&r.id, v)
            }
            ArtifactKind::Candidate => {
                let (piece, hash) =
                    r.id.split_once('/').ok_or_else(|| StoreError::NotFound(format!("candidate {}", r.id)))?;
                let meta: CodeCandidate = self.read_json(
                    &self.piece_dir(piece).join("candidates").join(format!("{hash}.meta.json")),
                    &format!("candidate {hash}"),
                )?;
                let ext = self.config()?.profile(&meta.runner_profile).map(|p| p.file_extension.clone()).unwrap_or_default();
                self.candidate_path(piece, hash, &ext)
            }
            ArtifactKind::Graph => self.root.join("graphs").join(format!("{}.json", r.id)),
            ArtifactKind::Trace => self.run_dir(&r.id).join("trace.json"),
        };
        fs::read(&path).map_err(|_| StoreError::NotFound(format!("{:?} {}", r.kind, r.id)))
    }

    // ---------------------------------------------------------------- history

    /// Appends one event; its payload is stored under `payloads/<digest>.json`.
    pub fn append_event(&mut self, draft: EventDraft) -> Result<u64, StoreError> {
        self.writable()?;
        let payload_digest =
            value_digest(&draft.payload).map_err(|e| StoreError::Format { path: self.root.clone(), detail: e.to_string() })?;
        let payload_path = self.root.join("payloads").join(format!("{payload_digest}.json"));
        if !payload_path.exists() {
            write_atomic(&payload_path, &canonical_bytes(&payload_path, &draft.payload)?)?;
        }
        let event = AuditEvent {
            seq: self.next_seq,
            timestamp: Utc::now(),
            actor: draft.actor,
            action: draft.action,
            refs: draft.refs,
            payload_digest,
        };
        let path = self.root.join(HISTORY_FILE);
        let mut line = canonical_bytes(&path, &event)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(&line).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
        self.next_seq += 1;
        Ok(event.seq)
    }

    /// Events in seq order. Gaps, bad lines and a missing final newline are
    /// reported as corruption.
    pub fn read_history(&self, filter: &HistoryFilter) -> Result<Vec<AuditEvent>, StoreError> {
        let path = self.root.join(HISTORY_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let line = bytes.iter().filter(|b| **b == b'\n').count() + 1;
            return Err(StoreError::Corrupt { line, detail: "truncated line".into() });
        }
        let mut out = Vec::new();
        let mut expected = 1;
        for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| StoreError::Corrupt { line: line_no, detail: e.to_string() })?;
            let event: AuditEvent = serde_json::from_str(&line)
                .map_err(|e| StoreError::Corrupt { line: line_no, detail: e.to_string() })?;
            if event.seq != expected {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    detail: format!("sequence gap: expected {expected}, found {}", event.seq),
                });
            }
            expected += 1;
            if filter.accepts(&event) {
                out.push(event);
            }
        }
        Ok(out)
    }

    pub fn payload(&self, digest: &str) -> Result<Value, StoreError> {
        self.read_json(&self.root.join("payloads").join(format!("{digest}.json")), &format!("payload {digest}"))
    }

    pub fn last_seq(&self) -> Result<u64, StoreError> {
        Ok(self.read_history(&HistoryFilter::default())?.last().map_or(0, |e| e.seq))
    }
}

fn journal_err(e: StoreError) -> JournalError {
    JournalError(e.to_string())
}

impl Journal for Project {
    fn record(&mut self, event: EventDraft) -> Result<(), JournalError> {
        self.append_event(event).map(|_| ()).map_err(journal_err)
    }

    fn save_candidate(&mut self, piece_id: &str, candidate: &CodeCandidate, extension: &str) -> Result<(), JournalError> {
        self.put_candidate(piece_id, candidate, extension).map(|_| ()).map_err(journal_err)
    }

    fn save_run_state(&mut self, state: &RunState) -> Result<(), JournalError> {
        self.put_run_state(state).map_err(journal_err)
    }

    fn save_trace(&mut self, trace: &TraceRecord) -> Result<(), JournalError> {
        self.put_trace(trace).map_err(journal_err)
    }
}
