//! Executes one candidate on one input in a child process.
//!
//! Harness protocol: the canonical input value followed by `\n` is written to
//! the child's stdin, then stdin is closed. The child must print exactly one
//! JSON value on one line to stdout and exit with status 0. Anything else is
//! classified, never propagated as an orchestrator error.

use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{canonicalize_value, CodeCandidate, Violation};

pub const DEFAULT_TIMEOUT_SECS: f64 = 5.0;
pub const DEFAULT_MAX_OUTPUT_BYTES: usize = 1_048_576;
const FILE_PLACEHOLDER: &str = "{file}";
const POLL_INTERVAL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerProfile {
    pub name: String,
    /// argv template; exactly one element contains `{file}`.
    pub command: Vec<String>,
    pub file_extension: String,
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_max_output")]
    pub max_output_bytes: usize,
    #[serde(default)]
    pub env_allowlist: Vec<String>,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

fn default_max_output() -> usize {
    DEFAULT_MAX_OUTPUT_BYTES
}

impl RunnerProfile {
    pub fn new(name: impl Into<String>, command: &[&str], file_extension: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            command: command.iter().map(|s| s.to_string()).collect(),
            file_extension: file_extension.into(),
            timeout: DEFAULT_TIMEOUT_SECS,
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
            env_allowlist: Vec::new(),
        }
    }

    pub fn with_timeout(mut self, secs: f64) -> Self {
        self.timeout = secs;
        self
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let occurrences: usize = self.command.iter().map(|a| a.matches(FILE_PLACEHOLDER).count()).sum();
        if occurrences != 1 {
            v.push(Violation::new("command", "must contain {file} exactly once"));
        }
        if self.command.first().map_or(true, |p| p.is_empty() || p.contains(FILE_PLACEHOLDER)) {
            v.push(Violation::new("command", "first element must name a program"));
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            v.push(Violation::new("timeout", "must be positive"));
        }
        if self.max_output_bytes == 0 {
            v.push(Violation::new("max_output_bytes", "must be positive"));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    fn timeout_duration(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    /// Exit code; `128 + signal` when the child died from a signal.
    NonzeroExit { code: i32 },
    Timeout,
    MalformedOutput,
    SpawnError { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
    #[serde(with = "lossy_bytes")]
    pub stdout_raw: Vec<u8>,
    #[serde(with = "lossy_bytes")]
    pub stderr_raw: Vec<u8>,
    pub truncated: bool,
    /// Seconds.
    pub duration: f64,
}

impl ExecutionResult {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    fn spawn_error(detail: String, started: Instant) -> Self {
        Self {
            status: ExecStatus::SpawnError { detail },
            output: None,
            stdout_raw: Vec::new(),
            stderr_raw: Vec::new(),
            truncated: false,
            duration: started.elapsed().as_secs_f64(),
        }
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr_raw).into_owned()
    }
}

/// Raw output is kept as bytes in memory and stored as lossy UTF-8 text.
mod lossy_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SandboxError {
    #[error("candidate targets runner profile {candidate:?} but profile {profile:?} was supplied")]
    ProfileMismatch { candidate: String, profile: String },
    #[error("invalid runner profile: {0}")]
    InvalidProfile(String),
    #[error("input is not encodable: {0}")]
    Input(String),
}

/// Runs `candidate` on `input` under `profile`.
pub fn execute_piece(
    candidate: &CodeCandidate,
    input: &Value,
    profile: &RunnerProfile,
) -> Result<ExecutionResult, SandboxError> {
    if candidate.runner_profile != profile.name {
        return Err(SandboxError::ProfileMismatch {
            candidate: candidate.runner_profile.clone(),
            profile: profile.name.clone(),
        });
    }
    profile.validate().map_err(|v| {
        SandboxError::InvalidProfile(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
    })?;
    let mut request = canonicalize_value(input).map_err(|e| SandboxError::Input(e.to_string()))?;
    request.push('\n');
    Ok(run_source(&candidate.source, request.as_bytes(), profile))
}

fn run_source(source: &str, stdin_bytes: &[u8], profile: &RunnerProfile) -> ExecutionResult {
    let started = Instant::now();
    let workdir = match tempfile::Builder::new().prefix("pieceforge-exec-").tempdir() {
        Ok(d) => d,
        Err(e) => return ExecutionResult::spawn_error(format!("workdir: {e}"), started),
    };
    let file = workdir.path().join(format!("piece{}", profile.file_extension));
    if let Err(e) = std::fs::write(&file, source) {
        return ExecutionResult::spawn_error(format!("write {}: {e}", file.display()), started);
    }
    let argv = substitute(&profile.command, &file);
    let mut cmd = match build_command(&argv, workdir.path(), &profile.env_allowlist) {
        Ok(c) => c,
        Err(detail) => return ExecutionResult::spawn_error(detail, started),
    };
    let child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return ExecutionResult::spawn_error(format!("{}: {e}", argv[0]), started),
    };
    let result = supervise(child, stdin_bytes, profile, started);
    drop(workdir);
    result
}

fn substitute(template: &[String], file: &Path) -> Vec<String> {
    let path = file.to_string_lossy();
    template.iter().map(|a| a.replace(FILE_PLACEHOLDER, &path)).collect()
}

/// Builds a command with a scrubbed environment in its own process group.
pub(crate) fn build_command(argv: &[String], workdir: &Path, allowlist: &[String]) -> Result<Command, String> {
    let program = argv.first().ok_or_else(|| "empty command".to_string())?;
    let resolved = resolve_program(program).ok_or_else(|| format!("{program}: not found on PATH"))?;
    let mut cmd = Command::new(resolved);
    cmd.args(&argv[1..])
        .current_dir(workdir)
        .env_clear()
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for name in allowlist {
        if let Some(val) = std::env::var_os(name) {
            cmd.env(name, val);
        }
    }
    Ok(cmd)
}

/// Resolves a bare program name against the orchestrator's own PATH, since
/// the child's environment is cleared.
fn resolve_program(program: &str) -> Option<PathBuf> {
    if program.contains('/') {
        return Some(PathBuf::from(program));
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|candidate| candidate.is_file())
}

struct Capture {
    bytes: Vec<u8>,
    truncated: bool,
}

fn capture<R: Read + Send + 'static>(mut reader: R, cap: usize) -> thread::JoinHandle<Capture> {
    thread::spawn(move || {
        let mut bytes = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(bytes.len());
                    if n > room {
                        truncated = true;
                    }
                    bytes.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        Capture { bytes, truncated }
    })
}

fn kill_group(child: &Child) {
    // SAFETY: kill(2) with a negative pid signals the process group created
    // by `process_group(0)`; it has no memory-safety preconditions.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
}

pub(crate) struct RawOutcome {
    pub exit: Option<std::process::ExitStatus>,
    pub timed_out: bool,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub truncated: bool,
}

/// Feeds stdin, drains stdout/stderr under a byte cap and enforces the deadline.
pub(crate) fn run_child(mut child: Child, stdin_bytes: &[u8], timeout: Duration, cap: usize) -> RawOutcome {
    let started = Instant::now();
    let stdout = capture(child.stdout.take().expect("piped stdout"), cap);
    let stderr = capture(child.stderr.take().expect("piped stderr"), cap);
    if let Some(mut stdin) = child.stdin.take() {
        let bytes = stdin_bytes.to_vec();
        // A child that never reads must not block us; EPIPE is expected.
        thread::spawn(move || {
            let _ = stdin.write_all(&bytes);
        });
    }

    let deadline = started + timeout;
    let mut timed_out = false;
    let exit = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                timed_out = true;
                kill_group(&child);
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(POLL_INTERVAL),
            Err(_) => {
                kill_group(&child);
                break child.wait().ok();
            }
        }
    };
    // Stray grandchildren would otherwise keep the pipes open.
    kill_group(&child);
    let out = stdout.join().unwrap_or(Capture { bytes: Vec::new(), truncated: false });
    let err = stderr.join().unwrap_or(Capture { bytes: Vec::new(), truncated: false });
    RawOutcome {
        exit,
        timed_out,
        truncated: out.truncated || err.truncated,
        stdout: out.bytes,
        stderr: err.bytes,
    }
}

fn supervise(child: Child, stdin_bytes: &[u8], profile: &RunnerProfile, started: Instant) -> ExecutionResult {
    let raw = run_child(child, stdin_bytes, profile.timeout_duration(), profile.max_output_bytes);
    let duration = started.elapsed().as_secs_f64();
    let (status, output) = classify(&raw);
    ExecutionResult {
        status,
        output,
        stdout_raw: raw.stdout,
        stderr_raw: raw.stderr,
        truncated: raw.truncated,
        duration,
    }
}

pub(crate) fn exit_code(status: &std::process::ExitStatus) -> i32 {
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

fn classify(raw: &RawOutcome) -> (ExecStatus, Option<Value>) {
    if raw.timed_out {
        return (ExecStatus::Timeout, None);
    }
    match raw.exit {
        Some(s) if s.success() => {}
        Some(s) => return (ExecStatus::NonzeroExit { code: exit_code(&s) }, None),
        None => return (ExecStatus::NonzeroExit { code: -1 }, None),
    }
    match parse_response(&raw.stdout, raw.truncated) {
        Some(v) => (ExecStatus::Ok, Some(v)),
        None => (ExecStatus::MalformedOutput, None),
    }
}

/// Exactly one line, optionally LF or CRLF terminated, holding one JSON value.
fn parse_response(stdout: &[u8], truncated: bool) -> Option<Value> {
    if truncated {
        return None;
    }
    let text = std::str::from_utf8(stdout).ok()?;
    let line = text.strip_suffix('\n').unwrap_or(text);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.contains('\n') || line.trim().is_empty() {
        return None;
    }
    serde_json::from_str(line).ok()
}
