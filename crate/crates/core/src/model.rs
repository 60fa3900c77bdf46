//! Shared domain types, the canonical JSON encoding and output comparison.
//!
//! Everything exchanged with pieces is a [`serde_json::Value`]. The canonical
//! text produced by [`canonicalize_value`] is the byte format used for content
//! hashes, stored artifacts and the audit log.

use std::fmt;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Integral floats below this magnitude are rendered without a fraction.
const INTEGRAL_FLOAT_LIMIT: f64 = 1e15;

pub const DEFAULT_ABS_EPS: f64 = 1e-9;
pub const DEFAULT_REL_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("non-finite number cannot be encoded")]
    NonFinite,
    #[error("invalid JSON: {0}")]
    Parse(String),
}

/// A field-level rule violation. Displayed as `field: reason`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub reason: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { field: field.into(), reason: reason.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// Checks the identifier rule `[a-z0-9-]{1,64}`.
pub fn slug_violation(field: &str, id: &str) -> Option<Violation> {
    if id.is_empty() {
        Some(Violation::new(field, "empty"))
    } else if id.len() > 64 {
        Some(Violation::new(field, "longer than 64 characters"))
    } else if !id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-') {
        Some(Violation::new(field, "illegal characters"))
    } else {
        None
    }
}

// ============================================================
// Canonical encoding
// ============================================================

/// Renders `v` as canonical JSON: sorted object keys, no whitespace,
/// integral numbers without a fractional part.
pub fn canonicalize_value(v: &Value) -> Result<String, EncodingError> {
    let mut out = String::new();
    write_canonical(v, &mut out)?;
    Ok(out)
}

/// Canonical encoding of any serializable value.
pub fn to_canonical<T: Serialize + ?Sized>(v: &T) -> Result<String, EncodingError> {
    let value = serde_json::to_value(v).map_err(|e| EncodingError::Parse(e.to_string()))?;
    canonicalize_value(&value)
}

/// Parses JSON text into a value. Non-finite numbers are rejected.
pub fn parse_value(text: &str) -> Result<Value, EncodingError> {
    serde_json::from_str(text).map_err(|e| EncodingError::Parse(e.to_string()))
}

/// Builds a number value, rejecting NaN and infinities.
pub fn number(f: f64) -> Result<Value, EncodingError> {
    serde_json::Number::from_f64(f).map(Value::Number).ok_or(EncodingError::NonFinite)
}

fn write_canonical(v: &Value, out: &mut String) -> Result<(), EncodingError> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out)?,
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            // String ordering on UTF-8 bytes is code point ordering.
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(k, out);
                out.push(':');
                write_canonical(&map[k], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

fn write_number(n: &serde_json::Number, out: &mut String) -> Result<(), EncodingError> {
    if let Some(i) = n.as_i64() {
        out.push_str(&i.to_string());
    } else if let Some(u) = n.as_u64() {
        out.push_str(&u.to_string());
    } else {
        let f = n.as_f64().ok_or(EncodingError::NonFinite)?;
        if !f.is_finite() {
            return Err(EncodingError::NonFinite);
        }
        if f.fract() == 0.0 && f.abs() < INTEGRAL_FLOAT_LIMIT {
            // also folds -0.0 into 0
            out.push_str(&(f as i64).to_string());
        } else {
            out.push_str(&n.to_string());
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut String) {
    // serde_json's string escaping is already minimal and deterministic.
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical encoding of `v`.
pub fn value_digest<T: Serialize + ?Sized>(v: &T) -> Result<String, EncodingError> {
    Ok(sha256_hex(to_canonical(v)?.as_bytes()))
}

// ============================================================
// Piece specifications
// ============================================================

/// The expert's natural-language description of one piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceSpec {
    pub id: String,
    pub title: String,
    pub description: String,
    #[serde(default)]
    pub hints: Vec<String>,
    #[serde(default)]
    pub input_shape: String,
    #[serde(default)]
    pub output_shape: String,
    pub runner_profile: String,
    #[serde(default = "one")]
    pub version: u32,
}

fn one() -> u32 {
    1
}

/// Returns every violated rule, or `Ok` when the spec is well formed.
pub fn validate_spec(spec: &PieceSpec) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    violations.extend(slug_violation("id", &spec.id));
    if spec.description.trim().is_empty() {
        violations.push(Violation::new("description", "empty"));
    }
    if spec.runner_profile.trim().is_empty() {
        violations.push(Violation::new("runner_profile", "empty"));
    }
    if spec.version < 1 {
        violations.push(Violation::new("version", "must be at least 1"));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

// ============================================================
// Comparison
// ============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComparisonMode {
    ExactCanonical,
    NumericTolerance {
        #[serde(default = "default_abs_eps")]
        abs_eps: f64,
        #[serde(default = "default_rel_eps")]
        rel_eps: f64,
    },
    RegexMatch {
        pattern: String,
    },
}

fn default_abs_eps() -> f64 {
    DEFAULT_ABS_EPS
}

fn default_rel_eps() -> f64 {
    DEFAULT_REL_EPS
}

impl Default for ComparisonMode {
    fn default() -> Self {
        ComparisonMode::ExactCanonical
    }
}

impl ComparisonMode {
    pub fn numeric() -> Self {
        ComparisonMode::NumericTolerance { abs_eps: DEFAULT_ABS_EPS, rel_eps: DEFAULT_REL_EPS }
    }

    pub fn validate(&self) -> Result<(), Violation> {
        match self {
            ComparisonMode::ExactCanonical => Ok(()),
            ComparisonMode::NumericTolerance { abs_eps, rel_eps } => {
                if !(abs_eps.is_finite() && *abs_eps >= 0.0) {
                    Err(Violation::new("abs_eps", "must be a non-negative number"))
                } else if !(rel_eps.is_finite() && *rel_eps >= 0.0) {
                    Err(Violation::new("rel_eps", "must be a non-negative number"))
                } else {
                    Ok(())
                }
            }
            ComparisonMode::RegexMatch { pattern } => full_match_regex(pattern)
                .map(|_| ())
                .map_err(|e| Violation::new("pattern", e.to_string())),
        }
    }
}

fn full_match_regex(pattern: &str) -> Result<Regex, regex::Error> {
    Regex::new(&format!("^(?:{pattern})$"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched: bool,
    pub detail: String,
}

impl MatchReport {
    pub fn matched() -> Self {
        Self { matched: true, detail: String::new() }
    }

    pub fn mismatch(detail: impl Into<String>) -> Self {
        Self { matched: false, detail: detail.into() }
    }
}

/// Decides whether `actual` satisfies `expected` under `mode`.
///
/// An invalid mode (negative tolerance, bad pattern) is reported as a
/// mismatch rather than an error so a single malformed case cannot abort a run.
pub fn compare_outputs(expected: &Value, actual: &Value, mode: &ComparisonMode) -> MatchReport {
    if let Err(v) = mode.validate() {
        return MatchReport::mismatch(format!("invalid comparison mode: {v}"));
    }
    match mode {
        ComparisonMode::ExactCanonical => {
            match (canonicalize_value(expected), canonicalize_value(actual)) {
                (Ok(e), Ok(a)) if e == a => MatchReport::matched(),
                (Ok(_), Ok(_)) => match first_difference(expected, actual, "$") {
                    Some(d) => MatchReport::mismatch(d),
                    None => MatchReport::mismatch("canonical forms differ"),
                },
                _ => MatchReport::mismatch("value not encodable"),
            }
        }
        ComparisonMode::NumericTolerance { abs_eps, rel_eps } => {
            match tolerance_mismatch(expected, actual, *abs_eps, *rel_eps, "$") {
                None => MatchReport::matched(),
                Some(d) => MatchReport::mismatch(d),
            }
        }
        ComparisonMode::RegexMatch { pattern } => {
            let Value::String(s) = actual else {
                return MatchReport::mismatch("type");
            };
            let re = full_match_regex(pattern).expect("validated above");
            if re.is_match(s) {
                MatchReport::matched()
            } else {
                MatchReport::mismatch(format!("{s:?} does not fully match /{pattern}/"))
            }
        }
    }
}

fn render(v: &Value) -> String {
    canonicalize_value(v).unwrap_or_else(|_| "<unencodable>".to_string())
}

fn first_difference(expected: &Value, actual: &Value, path: &str) -> Option<String> {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => {
            let mut keys: Vec<&String> = e.keys().chain(a.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = format!("{path}.{k}");
                match (e.get(k), a.get(k)) {
                    (Some(ev), Some(av)) => {
                        if let Some(d) = first_difference(ev, av, &p) {
                            return Some(d);
                        }
                    }
                    (Some(_), None) => return Some(format!("{p}: missing")),
                    (None, Some(_)) => return Some(format!("{p}: unexpected")),
                    (None, None) => unreachable!(),
                }
            }
            None
        }
        (Value::Array(e), Value::Array(a)) => {
            if e.len() != a.len() {
                return Some(format!("{path}: expected {} items, got {}", e.len(), a.len()));
            }
            e.iter()
                .zip(a)
                .enumerate()
                .find_map(|(i, (ev, av))| first_difference(ev, av, &format!("{path}[{i}]")))
        }
        _ => {
            if render(expected) == render(actual) {
                None
            } else {
                Some(format!("{path}: expected {}, got {}", render(expected), render(actual)))
            }
        }
    }
}

fn tolerance_mismatch(
    expected: &Value,
    actual: &Value,
    abs_eps: f64,
    rel_eps: f64,
    path: &str,
) -> Option<String> {
    match (expected, actual) {
        (Value::Number(e), Value::Number(a)) => {
            let (e, a) = (e.as_f64()?, a.as_f64()?);
            if (a - e).abs() <= abs_eps + rel_eps * e.abs() {
                None
            } else {
                Some(format!("{path}: expected {e}, got {a} (outside tolerance)"))
            }
        }
        (Value::Object(e), Value::Object(a)) => {
            if e.len() != a.len() || e.keys().any(|k| !a.contains_key(k)) {
                return Some(format!("{path}: object keys differ"));
            }
            let mut keys: Vec<&String> = e.keys().collect();
            keys.sort();
            keys.into_iter().find_map(|k| {
                tolerance_mismatch(&e[k], &a[k], abs_eps, rel_eps, &format!("{path}.{k}"))
            })
        }
        (Value::Array(e), Value::Array(a)) => {
            if e.len() != a.len() {
                return Some(format!("{path}: expected {} items, got {}", e.len(), a.len()));
            }
            e.iter().zip(a).enumerate().find_map(|(i, (ev, av))| {
                tolerance_mismatch(ev, av, abs_eps, rel_eps, &format!("{path}[{i}]"))
            })
        }
        _ => first_difference(expected, actual, path),
    }
}

// ============================================================
// Test suites
// ============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    #[serde(default)]
    pub name: String,
    pub input: Value,
    pub expected: Value,
    #[serde(default)]
    pub comparison: ComparisonMode,
    #[serde(default)]
    pub rationale: String,
}

impl TestCase {
    pub fn new(case_id: impl Into<String>, input: Value, expected: Value) -> Self {
        Self {
            case_id: case_id.into(),
            name: String::new(),
            input,
            expected,
            comparison: ComparisonMode::ExactCanonical,
            rationale: String::new(),
        }
    }

    /// Canonical form of the behavioural part of the case (rationale excluded).
    pub fn behaviour_digest(&self) -> String {
        let behaviour = serde_json::json!({
            "name": self.name,
            "input": self.input,
            "expected": self.expected,
            "comparison": self.comparison,
        });
        value_digest(&behaviour).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SuiteState {
    Draft,
    UnderReview,
    Approved,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SuiteError {
    #[error("illegal suite transition {from:?} -> {to:?}")]
    IllegalTransition { from: SuiteState, to: SuiteState },
    #[error("approved suites are immutable")]
    Immutable,
    #[error("suite has no cases")]
    Empty,
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
}

/// A versioned, ordered collection of cases for one piece.
///
/// The state can only move `Draft -> UnderReview -> Approved`; once approved
/// the suite refuses every mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    piece_id: String,
    suite_version: u32,
    cases: Vec<TestCase>,
    state: SuiteState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    approved_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    approved_at: Option<DateTime<Utc>>,
}

impl TestSuite {
    pub fn draft(piece_id: impl Into<String>, suite_version: u32, cases: Vec<TestCase>) -> Result<Self, SuiteError> {
        check_unique(&cases)?;
        Ok(Self {
            piece_id: piece_id.into(),
            suite_version,
            cases,
            state: SuiteState::Draft,
            approved_by: None,
            approved_at: None,
        })
    }

    pub fn piece_id(&self) -> &str {
        &self.piece_id
    }

    pub fn suite_version(&self) -> u32 {
        self.suite_version
    }

    pub fn cases(&self) -> &[TestCase] {
        &self.cases
    }

    pub fn state(&self) -> SuiteState {
        self.state
    }

    pub fn approved_by(&self) -> Option<&str> {
        self.approved_by.as_deref()
    }

    pub fn approved_at(&self) -> Option<DateTime<Utc>> {
        self.approved_at
    }

    pub fn case(&self, case_id: &str) -> Option<&TestCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn is_approved(&self) -> bool {
        self.state == SuiteState::Approved
    }

    /// Replaces the case list. Only Draft suites may be edited, and only
    /// Draft suites may be empty.
    pub fn set_cases(&mut self, cases: Vec<TestCase>) -> Result<(), SuiteError> {
        if self.state != SuiteState::Draft {
            return Err(SuiteError::Immutable);
        }
        check_unique(&cases)?;
        self.cases = cases;
        Ok(())
    }

    /// A Draft copy of this suite with the next version number.
    pub fn next_version(&self) -> Self {
        Self {
            piece_id: self.piece_id.clone(),
            suite_version: self.suite_version + 1,
            cases: self.cases.clone(),
            state: SuiteState::Draft,
            approved_by: None,
            approved_at: None,
        }
    }

    pub fn submit_for_review(&mut self) -> Result<(), SuiteError> {
        if self.state != SuiteState::Draft {
            return Err(SuiteError::IllegalTransition { from: self.state, to: SuiteState::UnderReview });
        }
        if self.cases.is_empty() {
            return Err(SuiteError::Empty);
        }
        self.state = SuiteState::UnderReview;
        Ok(())
    }

    pub fn approve(&mut self, approver: &str, at: DateTime<Utc>) -> Result<(), SuiteError> {
        if self.state != SuiteState::UnderReview {
            return Err(SuiteError::IllegalTransition { from: self.state, to: SuiteState::Approved });
        }
        if self.cases.is_empty() {
            return Err(SuiteError::Empty);
        }
        if self.cases.iter().any(|c| c.rationale.trim().is_empty()) {
            for case in &mut self.cases {
                if case.rationale.trim().is_empty() {
                    case.rationale = format!("accepted by {approver} without explanation");
                }
            }
        }
        self.state = SuiteState::Approved;
        self.approved_by = Some(approver.to_string());
        self.approved_at = Some(at);
        Ok(())
    }

    /// Hash of the canonical serialization.
    pub fn content_hash(&self) -> String {
        value_digest(self).unwrap_or_default()
    }
}

fn check_unique(cases: &[TestCase]) -> Result<(), SuiteError> {
    let mut seen = std::collections::HashSet::new();
    for c in cases {
        if !seen.insert(c.case_id.as_str()) {
            return Err(SuiteError::DuplicateCase(c.case_id.clone()));
        }
    }
    Ok(())
}

// ============================================================
// Code candidates
// ============================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCandidate {
    pub candidate_id: String,
    pub source: String,
    pub runner_profile: String,
    pub produced_at: DateTime<Utc>,
    pub origin_iteration: u32,
    pub backend_id: String,
}

impl CodeCandidate {
    pub fn new(
        source: impl Into<String>,
        runner_profile: impl Into<String>,
        origin_iteration: u32,
        backend_id: impl Into<String>,
    ) -> Self {
        let source = source.into();
        Self {
            candidate_id: candidate_id_for(&source),
            source,
            runner_profile: runner_profile.into(),
            produced_at: Utc::now(),
            origin_iteration,
            backend_id: backend_id.into(),
        }
    }
}

/// Content address of a candidate source.
pub fn candidate_id_for(source: &str) -> String {
    sha256_hex(source.as_bytes())
}
