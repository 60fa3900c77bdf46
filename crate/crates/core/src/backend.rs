//! Generative backends and the five request kinds built on them.
//!
//! A [`Backend`] turns one prompt into one reply. The request functions in
//! this module (`generate_tests`, `explain_tests`, `revise_tests`,
//! `generate_code`, `repair_code`) own prompt rendering, reply parsing and
//! protocol retries, so every backend only has to move text.
//!
//! Two backends ship: [`HttpChatBackend`] speaks the OpenAI-compatible
//! chat-completion format, [`ScriptedBackend`] replays a fixture file and is
//! fully deterministic.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::model::{
    canonicalize_value, sha256_hex, slug_violation, to_canonical, validate_spec, CodeCandidate, PieceSpec,
    SuiteState, TestCase, TestSuite, Violation,
};
use crate::review::{apply_structured_feedback, FeedbackItem};

pub const API_KEY_ENV: &str = "PIECEFORGE_API_KEY";
pub const STDERR_EXCERPT_LIMIT: usize = 2048;
pub const TRUNCATION_MARKER: &str = "…[truncated]";

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    GenerateTests,
    ExplainTests,
    ReviseTests,
    GenerateCode,
    RepairCode,
    SummarizeFailure,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::GenerateTests => "generate_tests",
            RequestKind::ExplainTests => "explain_tests",
            RequestKind::ReviseTests => "revise_tests",
            RequestKind::GenerateCode => "generate_code",
            RequestKind::RepairCode => "repair_code",
            RequestKind::SummarizeFailure => "summarize_failure",
        }
    }
}

// ============================================================
// Configuration
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Seconds.
    #[serde(default = "default_request_timeout")]
    pub request_timeout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
}

fn default_retries() -> u32 {
    3
}

fn default_request_timeout() -> f64 {
    60.0
}

impl BackendConfig {
    pub fn scripted(backend_id: impl Into<String>, script_path: impl Into<PathBuf>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::Scripted,
            endpoint_url: None,
            model_name: String::new(),
            temperature: 0.0,
            max_retries: default_retries(),
            request_timeout: default_request_timeout(),
            script_path: Some(script_path.into()),
        }
    }

    pub fn http(backend_id: impl Into<String>, endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::HttpChat,
            endpoint_url: Some(endpoint_url.into()),
            model_name: model_name.into(),
            temperature: 0.0,
            max_retries: default_retries(),
            request_timeout: default_request_timeout(),
            script_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        v.extend(slug_violation("backend_id", &self.backend_id));
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            v.push(Violation::new("temperature", "must be within [0, 2]"));
        }
        if !(self.request_timeout.is_finite() && self.request_timeout > 0.0) {
            v.push(Violation::new("request_timeout", "must be positive"));
        }
        match self.kind {
            BackendKind::HttpChat => {
                match &self.endpoint_url {
                    None => v.push(Violation::new("endpoint_url", "required for http_chat")),
                    Some(u) if !(u.starts_with("http://") || u.starts_with("https://")) => {
                        v.push(Violation::new("endpoint_url", "must be an http(s) URL"))
                    }
                    Some(_) => {}
                }
                if self.model_name.is_empty() {
                    v.push(Violation::new("model_name", "required for http_chat"));
                }
                if self.script_path.is_some() {
                    v.push(Violation::new("script_path", "only valid for scripted"));
                }
            }
            BackendKind::Scripted => {
                if self.script_path.is_none() {
                    v.push(Violation::new("script_path", "required for scripted"));
                }
                if self.endpoint_url.is_some() {
                    v.push(Violation::new("endpoint_url", "only valid for http_chat"));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Instantiates the configured backend. Relative script paths resolve
    /// against `base_dir`; a scripted backend keeps its cursor in `cursor`.
    pub fn build(&self, base_dir: &Path, cursor: Option<PathBuf>) -> Result<Box<dyn Backend>, BackendError> {
        self.validate().map_err(|v| BackendError::Precondition(join_violations(&v)))?;
        match self.kind {
            BackendKind::Scripted => {
                let path = self.script_path.as_ref().expect("validated");
                let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let backend = ScriptedBackend::from_file(&self.backend_id, &path, self.max_retries)?;
                Ok(Box::new(match cursor {
                    Some(c) => backend.with_cursor_file(c)?,
                    None => backend,
                }))
            }
            BackendKind::HttpChat => Ok(Box::new(HttpChatBackend::new(self.clone()))),
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

// ============================================================
// Templates
// ============================================================

pub const PLACEHOLDERS: [&str; 5] = ["spec", "suite", "failures", "feedback", "code"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

#[derive(Debug, Default, Clone)]
pub struct PromptContext<'a> {
    pub spec: Option<&'a PieceSpec>,
    pub suite: Option<&'a TestSuite>,
    pub failures: Option<String>,
    pub feedback: Option<String>,
    pub code: Option<&'a str>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self { name: name.into(), body: body.into() }
    }

    /// Every `{identifier}` in the body must be one of [`PLACEHOLDERS`].
    pub fn validate(&self) -> Result<(), Violation> {
        for name in placeholder_names(&self.body) {
            if !PLACEHOLDERS.contains(&name) {
                return Err(Violation::new("body", format!("unknown placeholder {{{name}}}")));
            }
        }
        Ok(())
    }

    pub fn render(&self, ctx: &PromptContext<'_>) -> String {
        let mut out = self.body.clone();
        let spec = ctx.spec.map(render_spec).unwrap_or_default();
        let suite = ctx.suite.map(render_suite).unwrap_or_default();
        out = out.replace("{spec}", &spec);
        out = out.replace("{suite}", &suite);
        out = out.replace("{failures}", ctx.failures.as_deref().unwrap_or(""));
        out = out.replace("{feedback}", ctx.feedback.as_deref().unwrap_or(""));
        out = out.replace("{code}", ctx.code.unwrap_or(""));
        out
    }
}

fn placeholder_names(body: &str) -> Vec<&str> {
    let mut names = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &body[i + 1..];
            let len = rest.bytes().take_while(|b| b.is_ascii_lowercase() || *b == b'_').count();
            if len > 0 && rest.as_bytes().get(len) == Some(&b'}') {
                names.push(&rest[..len]);
                i += len + 2;
                continue;
            }
        }
        i += 1;
    }
    names
}

fn render_spec(spec: &PieceSpec) -> String {
    let mut s = format!("Piece: {} ({})\n\n{}\n", spec.title, spec.id, spec.description.trim());
    if !spec.input_shape.is_empty() {
        s.push_str(&format!("\nInput shape: {}\n", spec.input_shape));
    }
    if !spec.output_shape.is_empty() {
        s.push_str(&format!("Output shape: {}\n", spec.output_shape));
    }
    if !spec.hints.is_empty() {
        s.push_str("\nImplementation hints:\n");
        for h in &spec.hints {
            s.push_str(&format!("- {h}\n"));
        }
    }
    s
}

fn render_suite(suite: &TestSuite) -> String {
    to_canonical(&json!({ "cases": suite.cases() })).unwrap_or_default()
}

const PROTOCOL_NOTE: &str = "Programs read one JSON value from a single line on stdin and print exactly one JSON value on a single line to stdout.";

/// The templates used for each request kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub generate_tests: PromptTemplate,
    pub explain_tests: PromptTemplate,
    pub revise_tests: PromptTemplate,
    pub generate_code: PromptTemplate,
    pub repair_code: PromptTemplate,
    pub summarize_failure: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            generate_tests: PromptTemplate::new(
                "generate_tests",
                format!(
                    "Write a test suite for the following piece of software.\n\n{{spec}}\n\n{PROTOCOL_NOTE}\n\
                     Reply with one fenced ```json block holding {{\"cases\": [{{\"case_id\", \"name\", \"input\", \"expected\", \"rationale\"}}]}}."
                ),
            ),
            explain_tests: PromptTemplate::new(
                "explain_tests",
                "Explain each test case below for a domain expert who does not read code.\n\n{spec}\n\nTests:\n{suite}\n\n\
                 Reply with one fenced ```json block holding {\"per_case\": [{\"case_id\", \"restated_input\", \"restated_expected\", \"reasoning\"}], \"coverage_notes\": \"...\"}, covering every case exactly once.",
            ),
            revise_tests: PromptTemplate::new(
                "revise_tests",
                "Revise the test suite according to the expert's feedback.\n\n{spec}\n\nCurrent tests:\n{suite}\n\nFeedback:\n{feedback}\n\n\
                 Reply with one fenced ```json block holding {\"cases\": [...]} containing the new or changed cases only.",
            ),
            generate_code: PromptTemplate::new(
                "generate_code",
                format!(
                    "Implement the following piece so that every test passes.\n\n{{spec}}\n\nTests:\n{{suite}}\n\n{PROTOCOL_NOTE}\n\
                     Reply with the complete program in one fenced code block."
                ),
            ),
            repair_code: PromptTemplate::new(
                "repair_code",
                format!(
                    "The program below fails some tests. Fix it.\n\n{{spec}}\n\nTests:\n{{suite}}\n\nProgram:\n```\n{{code}}\n```\n\n\
                     Failures:\n{{failures}}\n\n{PROTOCOL_NOTE}\nReply with the complete corrected program in one fenced code block."
                ),
            ),
            summarize_failure: PromptTemplate::new(
                "summarize_failure",
                "A dataflow system failed an integration test. Summarize what each component did and which one most likely misbehaves.\n\nTrace:\n{failures}",
            ),
        }
    }
}

impl Templates {
    pub fn get(&self, kind: RequestKind) -> &PromptTemplate {
        match kind {
            RequestKind::GenerateTests => &self.generate_tests,
            RequestKind::ExplainTests => &self.explain_tests,
            RequestKind::ReviseTests => &self.revise_tests,
            RequestKind::GenerateCode => &self.generate_code,
            RequestKind::RepairCode => &self.repair_code,
            RequestKind::SummarizeFailure => &self.summarize_failure,
        }
    }

    pub fn validate(&self) -> Result<(), Violation> {
        [
            &self.generate_tests,
            &self.explain_tests,
            &self.revise_tests,
            &self.generate_code,
            &self.repair_code,
            &self.summarize_failure,
        ]
        .into_iter()
        .try_for_each(PromptTemplate::validate)
    }
}

// ============================================================
// Backends
// ============================================================

/// One prompt in, one reply out. Requests are serialized per instance.
pub trait Backend: Send {
    fn backend_id(&self) -> &str;
    /// Retries allowed for unparseable replies.
    fn max_retries(&self) -> u32;
    fn complete(&mut self, kind: RequestKind, prompt: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: RequestKind,
    pub prompt_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Unreachable { unreachable: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub replies: BTreeMap<RequestKind, Vec<ScriptedReply>>,
}

impl Script {
    pub fn push(&mut self, kind: RequestKind, reply: impl Into<String>) -> &mut Self {
        self.replies.entry(kind).or_default().push(ScriptedReply::Text(reply.into()));
        self
    }

    pub fn push_unreachable(&mut self, kind: RequestKind) -> &mut Self {
        self.replies
            .entry(kind)
            .or_default()
            .push(ScriptedReply::Unreachable { unreachable: "scripted outage".into() });
        self
    }
}

/// Replays replies from a script, one queue per request kind.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    backend_id: String,
    max_retries: u32,
    queues: BTreeMap<RequestKind, VecDeque<ScriptedReply>>,
    transcript: Vec<TranscriptEntry>,
    consumed: BTreeMap<RequestKind, usize>,
    cursor_file: Option<PathBuf>,
}

impl ScriptedBackend {
    pub fn new(backend_id: impl Into<String>, script: Script) -> Self {
        Self {
            backend_id: backend_id.into(),
            max_retries: default_retries(),
            queues: script.replies.into_iter().map(|(k, v)| (k, v.into())).collect(),
            transcript: Vec::new(),
            consumed: BTreeMap::new(),
            cursor_file: None,
        }
    }

    pub fn from_file(backend_id: &str, path: &Path, max_retries: u32) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Precondition(format!("script {}: {e}", path.display())))?;
        let script: Script = serde_json::from_str(&text)
            .map_err(|e| BackendError::Precondition(format!("script {}: {e}", path.display())))?;
        Ok(Self::new(backend_id, script).with_max_retries(max_retries))
    }

    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    /// Persists how many replies of each kind were consumed, so separate
    /// processes sharing `path` continue where the last one stopped.
    pub fn with_cursor_file(mut self, path: PathBuf) -> Result<Self, BackendError> {
        let consumed: BTreeMap<RequestKind, usize> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| BackendError::Precondition(format!("cursor {}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(BackendError::Precondition(format!("cursor {}: {e}", path.display()))),
        };
        for (kind, n) in &consumed {
            if let Some(q) = self.queues.get_mut(kind) {
                q.drain(..(*n).min(q.len()));
            }
        }
        self.consumed = consumed;
        self.cursor_file = Some(path);
        Ok(self)
    }

    fn save_cursor(&self) -> Result<(), BackendError> {
        let Some(path) = &self.cursor_file else { return Ok(()) };
        let fail = |e: &dyn std::fmt::Display| BackendError::Precondition(format!("cursor {}: {e}", path.display()));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| fail(&e))?;
        }
        let text = serde_json::to_string(&self.consumed).map_err(|e| fail(&e))?;
        std::fs::write(path, text).map_err(|e| fail(&e))
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn remaining(&self, kind: RequestKind) -> usize {
        self.queues.get(&kind).map_or(0, VecDeque::len)
    }
}

impl Backend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn max_retries(&self) -> u32 {
        self.max_retries
    }

    fn complete(&mut self, kind: RequestKind, prompt: &str) -> Result<String, BackendError> {
        self.transcript.push(TranscriptEntry { kind, prompt_digest: sha256_hex(prompt.as_bytes()) });
        let reply = self.queues.get_mut(&kind).and_then(VecDeque::pop_front);
        if reply.is_some() {
            *self.consumed.entry(kind).or_default() += 1;
            self.save_cursor()?;
        }
        match reply {
            Some(ScriptedReply::Text(t)) => Ok(t),
            Some(ScriptedReply::Unreachable { unreachable }) => Err(BackendError::Unreachable(unreachable)),
            None => Err(BackendError::Protocol(format!("script exhausted for {}", kind.as_str()))),
        }
    }
}

/// OpenAI-compatible chat-completion client with bounded, jittered retries.
pub struct HttpChatBackend {
    config: BackendConfig,
    backoff_base: Duration,
    client: Option<reqwest::blocking::Client>,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Self {
        Self { config, backoff_base: Duration::from_secs(1), client: None }
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn client(&mut self) -> Result<&reqwest::blocking::Client, BackendError> {
        if self.client.is_none() {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs_f64(self.config.request_timeout))
                .build()
                .map_err(|e| BackendError::Unreachable(e.to_string()))?;
            self.client = Some(client);
        }
        Ok(self.client.as_ref().expect("just set"))
    }

    fn attempt(&mut self, body: &Value) -> Result<String, Attempt> {
        let url = self.config.endpoint_url.clone().unwrap_or_default();
        let key = std::env::var(API_KEY_ENV).ok();
        let client = self.client().map_err(Attempt::Fatal)?;
        let mut req = client.post(&url).json(body);
        if let Some(key) = key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(BackendError::Unreachable(e.to_string())))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(BackendError::Unreachable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Protocol(format!("HTTP {status}"))));
        }
        let payload: Value = resp
            .json()
            .map_err(|e| Attempt::Fatal(BackendError::Protocol(format!("response body: {e}"))))?;
        payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(BackendError::Protocol("response has no choices[0].message.content".into())))
    }
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

/// Full-jitter exponential backoff: uniform in `[0, base * 2^attempt]`.
pub fn backoff_delay(base: Duration, attempt: u32, rng: &mut impl Rng) -> Duration {
    let cap = base.saturating_mul(2u32.saturating_pow(attempt.min(16)));
    Duration::from_secs_f64(rng.gen_range(0.0..=cap.as_secs_f64()))
}

impl Backend for HttpChatBackend {
    fn backend_id(&self) -> &str {
        &self.config.backend_id
    }

    fn max_retries(&self) -> u32 {
        self.config.max_retries
    }

    fn complete(&mut self, kind: RequestKind, prompt: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": "You are a careful software engineer. Follow the reply format exactly."},
                {"role": "user", "content": prompt},
            ],
        });
        let mut rng = rand::thread_rng();
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.config.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let delay = backoff_delay(self.backoff_base, attempt, &mut rng);
                    warn!(kind = kind.as_str(), %e, ?delay, "retrying backend request");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

// ============================================================
// Reply parsing
// ============================================================

/// Bodies of all fenced blocks in `reply`, in order.
pub fn fenced_blocks(reply: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in reply.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some(lines) => blocks.push(lines.join("\n")),
                None => current = Some(Vec::new()),
            }
        } else if let Some(lines) = current.as_mut() {
            lines.push(line);
        }
    }
    blocks
}

fn first_json_block(reply: &str) -> Result<Value, String> {
    let block = fenced_blocks(reply).into_iter().next().ok_or("reply has no fenced block")?;
    serde_json::from_str(&block).map_err(|e| format!("fenced block is not valid JSON: {e}"))
}

#[derive(Deserialize)]
struct RawCase {
    #[serde(default)]
    case_id: Option<String>,
    #[serde(default)]
    name: String,
    input: Value,
    expected: Value,
    #[serde(default)]
    comparison: crate::model::ComparisonMode,
    #[serde(default)]
    rationale: String,
}

/// Parses `{"cases": [...]}` (or a bare array) into cases. Missing ids get
/// `case-N` numbering that skips ids already in `taken`.
pub fn parse_cases(reply: &str, taken: &HashSet<String>) -> Result<Vec<TestCase>, String> {
    let doc = first_json_block(reply)?;
    let list = match doc {
        Value::Array(items) => Value::Array(items),
        Value::Object(mut m) => m.remove("cases").ok_or("JSON document has no \"cases\" list")?,
        _ => return Err("expected an object with a \"cases\" list".into()),
    };
    let raw: Vec<RawCase> = serde_json::from_value(list).map_err(|e| format!("malformed case: {e}"))?;
    if raw.is_empty() {
        return Err("no cases in reply".into());
    }
    let mut used: HashSet<String> = taken.clone();
    let mut next = 1;
    let mut cases = Vec::with_capacity(raw.len());
    for r in raw {
        r.comparison.validate().map_err(|v| format!("case comparison: {v}"))?;
        let case_id = match r.case_id {
            Some(id) => {
                if let Some(v) = slug_violation("case_id", &id) {
                    return Err(v.to_string());
                }
                id
            }
            None => loop {
                let id = format!("case-{next}");
                next += 1;
                if !used.contains(&id) {
                    break id;
                }
            },
        };
        if cases.iter().any(|c: &TestCase| c.case_id == case_id) {
            return Err(format!("duplicate case_id {case_id}"));
        }
        used.insert(case_id.clone());
        cases.push(TestCase {
            case_id,
            name: r.name,
            input: r.input,
            expected: r.expected,
            comparison: r.comparison,
            rationale: r.rationale,
        });
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseExplanation {
    pub case_id: String,
    #[serde(default)]
    pub restated_input: String,
    #[serde(default)]
    pub restated_expected: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteExplanation {
    pub piece_id: String,
    pub per_case: Vec<CaseExplanation>,
    #[serde(default)]
    pub coverage_notes: String,
}

impl SuiteExplanation {
    pub fn get(&self, case_id: &str) -> Option<&CaseExplanation> {
        self.per_case.iter().find(|c| c.case_id == case_id)
    }
}

fn parse_explanation(reply: &str, suite: &TestSuite) -> Result<SuiteExplanation, String> {
    #[derive(Deserialize)]
    struct Raw {
        per_case: Vec<CaseExplanation>,
        #[serde(default)]
        coverage_notes: String,
    }
    let raw: Raw = serde_json::from_value(first_json_block(reply)?).map_err(|e| format!("malformed explanation: {e}"))?;
    let mut seen = HashSet::new();
    for c in &raw.per_case {
        if suite.case(&c.case_id).is_none() {
            return Err(format!("explanation mentions unknown case {}", c.case_id));
        }
        if !seen.insert(c.case_id.as_str()) {
            return Err(format!("case {} explained twice", c.case_id));
        }
    }
    let missing: Vec<&str> =
        suite.cases().iter().map(|c| c.case_id.as_str()).filter(|id| !seen.contains(id)).collect();
    if !missing.is_empty() {
        return Err(format!("explanation is missing cases: {}", missing.join(", ")));
    }
    // keep suite order
    let mut per_case = raw.per_case;
    per_case.sort_by_key(|c| suite.cases().iter().position(|s| s.case_id == c.case_id));
    Ok(SuiteExplanation { piece_id: suite.piece_id().to_string(), per_case, coverage_notes: raw.coverage_notes })
}

fn correction_preamble(error: &str) -> String {
    format!(
        "Your previous reply could not be used: {error}.\nAnswer again, following the requested reply format exactly.\n\n"
    )
}

/// Sends `prompt`, re-prompting with a correction preamble while `parse`
/// rejects the reply, up to `max_retries` extra attempts.
fn request_parsed<T>(
    backend: &mut dyn Backend,
    kind: RequestKind,
    prompt: &str,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<T, BackendError> {
    let attempts = backend.max_retries() + 1;
    let mut current = prompt.to_string();
    let mut last_error = String::new();
    for attempt in 0..attempts {
        let reply = backend.complete(kind, &current)?;
        match parse(&reply) {
            Ok(v) => return Ok(v),
            Err(e) => {
                debug!(kind = kind.as_str(), attempt, error = %e, "unusable reply");
                current = format!("{}{prompt}", correction_preamble(&e));
                last_error = e;
            }
        }
    }
    Err(BackendError::Protocol(format!("{} after {attempts} attempts: {last_error}", kind.as_str())))
}

fn require_valid_spec(spec: &PieceSpec) -> Result<(), BackendError> {
    validate_spec(spec).map_err(|v| BackendError::Precondition(format!("invalid spec: {}", join_violations(&v))))
}

// ============================================================
// Request kinds
// ============================================================

/// Asks the backend for an initial Draft suite (version 1).
pub fn generate_tests(
    spec: &PieceSpec,
    template: &PromptTemplate,
    backend: &mut dyn Backend,
) -> Result<TestSuite, BackendError> {
    require_valid_spec(spec)?;
    let prompt = template.render(&PromptContext { spec: Some(spec), ..Default::default() });
    let cases = request_parsed(backend, RequestKind::GenerateTests, &prompt, |r| parse_cases(r, &HashSet::new()))?;
    TestSuite::draft(&spec.id, 1, cases).map_err(|e| BackendError::Protocol(e.to_string()))
}

pub fn explain_tests(
    spec: &PieceSpec,
    suite: &TestSuite,
    template: &PromptTemplate,
    backend: &mut dyn Backend,
) -> Result<SuiteExplanation, BackendError> {
    if suite.cases().is_empty() {
        return Err(BackendError::Precondition("cannot explain an empty suite".into()));
    }
    let prompt = template.render(&PromptContext { spec: Some(spec), suite: Some(suite), ..Default::default() });
    request_parsed(backend, RequestKind::ExplainTests, &prompt, |r| parse_explanation(r, suite))
}

/// Applies feedback to an UnderReview suite and returns the next Draft version.
///
/// Structural items are applied locally; only free-text items reach the
/// backend, whose returned cases replace same-id cases or are appended.
pub fn revise_tests(
    spec: &PieceSpec,
    suite: &TestSuite,
    feedback: &[FeedbackItem],
    template: &PromptTemplate,
    backend: &mut dyn Backend,
) -> Result<TestSuite, BackendError> {
    if suite.state() != SuiteState::UnderReview {
        return Err(BackendError::Precondition(format!("suite is {:?}, expected UnderReview", suite.state())));
    }
    if feedback.is_empty() {
        return Err(BackendError::Precondition("feedback is empty".into()));
    }
    let mut cases = apply_structured_feedback(suite.cases(), feedback)
        .map_err(|e| BackendError::Precondition(e.to_string()))?;
    let mut next = suite.next_version();

    let free_text: Vec<&str> = feedback
        .iter()
        .filter_map(|f| match f {
            FeedbackItem::FreeText { text } => Some(text.as_str()),
            _ => None,
        })
        .collect();
    if !free_text.is_empty() {
        next.set_cases(cases.clone()).map_err(|e| BackendError::Precondition(e.to_string()))?;
        let feedback_text = free_text.iter().map(|t| format!("- {t}")).collect::<Vec<_>>().join("\n");
        let prompt = template.render(&PromptContext {
            spec: Some(spec),
            suite: Some(&next),
            feedback: Some(feedback_text),
            ..Default::default()
        });
        let taken: HashSet<String> = cases.iter().map(|c| c.case_id.clone()).collect();
        let returned = request_parsed(backend, RequestKind::ReviseTests, &prompt, |r| parse_cases(r, &taken))?;
        for case in returned {
            match cases.iter_mut().find(|c| c.case_id == case.case_id) {
                Some(existing) => *existing = case,
                None => cases.push(case),
            }
        }
    }
    next.set_cases(cases).map_err(|e| BackendError::Protocol(e.to_string()))?;
    Ok(next)
}

fn extract_code(reply: &str) -> Result<String, String> {
    let block = fenced_blocks(reply).into_iter().next().ok_or("reply has no fenced code block")?;
    if block.trim().is_empty() {
        return Err("fenced code block is empty".into());
    }
    Ok(if block.ends_with('\n') { block } else { format!("{block}\n") })
}

pub fn generate_code(
    spec: &PieceSpec,
    suite: &TestSuite,
    template: &PromptTemplate,
    backend: &mut dyn Backend,
    origin_iteration: u32,
) -> Result<CodeCandidate, BackendError> {
    if !suite.is_approved() {
        return Err(BackendError::Precondition(format!("suite is {:?}, expected Approved", suite.state())));
    }
    let prompt = template.render(&PromptContext { spec: Some(spec), suite: Some(suite), ..Default::default() });
    let source = request_parsed(backend, RequestKind::GenerateCode, &prompt, extract_code)?;
    Ok(CodeCandidate::new(source, &spec.runner_profile, origin_iteration, backend.backend_id()))
}

pub fn repair_code(
    spec: &PieceSpec,
    suite: &TestSuite,
    previous: &CodeCandidate,
    failures: &FailureDigest,
    template: &PromptTemplate,
    backend: &mut dyn Backend,
    origin_iteration: u32,
) -> Result<CodeCandidate, BackendError> {
    if failures.is_empty() {
        return Err(BackendError::Precondition("failure digest is empty".into()));
    }
    if !suite.is_approved() {
        return Err(BackendError::Precondition(format!("suite is {:?}, expected Approved", suite.state())));
    }
    let prompt = template.render(&PromptContext {
        spec: Some(spec),
        suite: Some(suite),
        code: Some(&previous.source),
        failures: Some(failures.render()),
        ..Default::default()
    });
    let source = request_parsed(backend, RequestKind::RepairCode, &prompt, extract_code)?;
    Ok(CodeCandidate::new(source, &spec.runner_profile, origin_iteration, backend.backend_id()))
}

/// Free-form text completion, used for advisory summaries.
pub fn summarize(template: &PromptTemplate, digest: String, backend: &mut dyn Backend) -> Result<String, BackendError> {
    let prompt = template.render(&PromptContext { failures: Some(digest), ..Default::default() });
    backend.complete(RequestKind::SummarizeFailure, &prompt)
}

// ============================================================
// Failure digests
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureOutcome {
    WrongOutput,
    NonzeroExit,
    Timeout,
    MalformedOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub case_id: String,
    pub outcome: FailureOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<String>,
    pub stderr_excerpt: String,
}

/// What went wrong in one suite run, bounded for inclusion in a prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureDigest {
    pub entries: Vec<FailureEntry>,
    /// Static checker output when the candidate was rejected by the gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_report: Option<String>,
}

impl FailureDigest {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.static_report.is_none()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("- case {}: {}", e.case_id, to_canonical(&e.outcome).unwrap_or_default()));
            if let Some(actual) = &e.actual {
                out.push_str(&format!(", actual output {actual}"));
            }
            out.push('\n');
            if !e.stderr_excerpt.is_empty() {
                out.push_str(&format!("  stderr:\n{}\n", e.stderr_excerpt));
            }
        }
        if let Some(report) = &self.static_report {
            out.push_str(&format!("- static checks:\n{report}\n"));
        }
        out
    }
}

/// Cuts `bytes` to at most `limit` bytes of lossy UTF-8, marker included.
pub fn excerpt(bytes: &[u8], limit: usize) -> String {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= limit {
        return text.into_owned();
    }
    let mut end = limit.saturating_sub(TRUNCATION_MARKER.len());
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}{TRUNCATION_MARKER}", &text[..end])
}

pub fn canonical_actual(v: &Value) -> Option<String> {
    canonicalize_value(v).ok()
}
