//! Expert-steered test production.
//!
//! A [`ReviewBoard`] holds at most one open [`ReviewSession`] per piece. The
//! session's suite is always UnderReview; each round of feedback produces the
//! next suite version, and approval freezes the suite and closes the session.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{explain_tests, generate_tests, revise_tests, Backend, BackendError, SuiteExplanation, Templates};
use crate::journal::{actions, refs, Actor, EventDraft, Journal, JournalError};
use crate::model::{slug_violation, ComparisonMode, PieceSpec, SuiteError, SuiteState, TestCase, TestSuite};

/// Partial case used by `modify_case`; absent fields keep their value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasePatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackItem {
    AddCase { case: TestCase },
    RemoveCase { case_id: String },
    ModifyCase { case_id: String, case: CasePatch },
    FreeText { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeedbackError {
    #[error("unknown case_id {0}")]
    UnknownCase(String),
    #[error("case_id {0} already exists")]
    DuplicateCase(String),
    #[error("invalid feedback: {0}")]
    Invalid(String),
}

impl FeedbackItem {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        match self {
            FeedbackItem::AddCase { case } => {
                if let Some(v) = slug_violation("case_id", &case.case_id) {
                    return Err(FeedbackError::Invalid(v.to_string()));
                }
                case.comparison.validate().map_err(|v| FeedbackError::Invalid(v.to_string()))
            }
            FeedbackItem::RemoveCase { case_id } if case_id.is_empty() => {
                Err(FeedbackError::Invalid("remove_case needs a case_id".into()))
            }
            FeedbackItem::ModifyCase { case_id, case } => {
                if case_id.is_empty() {
                    return Err(FeedbackError::Invalid("modify_case needs a case_id".into()));
                }
                match &case.comparison {
                    Some(c) => c.validate().map_err(|v| FeedbackError::Invalid(v.to_string())),
                    None => Ok(()),
                }
            }
            FeedbackItem::FreeText { text } if text.trim().is_empty() => {
                Err(FeedbackError::Invalid("free_text is empty".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Applies the structural items (add/remove/modify) in order. Free-text
/// items are ignored here.
pub fn apply_structured_feedback(cases: &[TestCase], feedback: &[FeedbackItem]) -> Result<Vec<TestCase>, FeedbackError> {
    let mut out = cases.to_vec();
    for item in feedback {
        item.validate()?;
        match item {
            FeedbackItem::AddCase { case } => {
                if out.iter().any(|c| c.case_id == case.case_id) {
                    return Err(FeedbackError::DuplicateCase(case.case_id.clone()));
                }
                out.push(case.clone());
            }
            FeedbackItem::RemoveCase { case_id } => {
                let pos = out
                    .iter()
                    .position(|c| &c.case_id == case_id)
                    .ok_or_else(|| FeedbackError::UnknownCase(case_id.clone()))?;
                out.remove(pos);
            }
            FeedbackItem::ModifyCase { case_id, case: patch } => {
                let target = out
                    .iter_mut()
                    .find(|c| &c.case_id == case_id)
                    .ok_or_else(|| FeedbackError::UnknownCase(case_id.clone()))?;
                if let Some(v) = &patch.name {
                    target.name = v.clone();
                }
                if let Some(v) = &patch.input {
                    target.input = v.clone();
                }
                if let Some(v) = &patch.expected {
                    target.expected = v.clone();
                }
                if let Some(v) = &patch.comparison {
                    target.comparison = v.clone();
                }
                if let Some(v) = &patch.rationale {
                    target.rationale = v.clone();
                }
            }
            FeedbackItem::FreeText { .. } => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRound {
    pub round: u32,
    pub feedback: Vec<FeedbackItem>,
    pub suite_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub piece_id: String,
    pub current_suite: TestSuite,
    pub current_explanation: SuiteExplanation,
    pub round: u32,
    pub history: Vec<ReviewRound>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("a review session is already open for {0}")]
    SessionOpen(String),
    #[error("no open session for {0}")]
    NoSession(String),
    #[error("feedback list is empty")]
    EmptyFeedback,
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("cannot approve: {0}")]
    Rejected(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// Open review sessions and the latest approved suite per piece.
#[derive(Debug, Default, Clone)]
pub struct ReviewBoard {
    sessions: BTreeMap<String, ReviewSession>,
    approved: BTreeMap<String, TestSuite>,
}

impl ReviewBoard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Re-registers a persisted open session.
    pub fn restore_session(&mut self, session: ReviewSession) {
        self.sessions.insert(session.piece_id.clone(), session);
    }

    pub fn restore_approved(&mut self, suite: TestSuite) {
        if suite.is_approved() {
            self.approved.insert(suite.piece_id().to_string(), suite);
        }
    }

    pub fn session(&self, piece_id: &str) -> Option<&ReviewSession> {
        self.sessions.get(piece_id)
    }

    pub fn approved(&self, piece_id: &str) -> Option<&TestSuite> {
        self.approved.get(piece_id)
    }

    /// Drafts a suite, explains it and opens a session at round 1.
    ///
    /// Nothing is recorded and no session is opened if any backend request fails.
    pub fn start_review(
        &mut self,
        spec: &PieceSpec,
        backend: &mut dyn Backend,
        templates: &Templates,
        journal: &mut dyn Journal,
    ) -> Result<&ReviewSession, ReviewError> {
        if self.sessions.contains_key(&spec.id) {
            return Err(ReviewError::SessionOpen(spec.id.clone()));
        }
        let generated = generate_tests(spec, &templates.generate_tests, backend)?;
        let version = self.approved.get(&spec.id).map_or(1, |s| s.suite_version() + 1);
        let mut suite = TestSuite::draft(&spec.id, version, generated.cases().to_vec())?;
        let explanation = explain_tests(spec, &suite, &templates.explain_tests, backend)?;
        suite.set_cases(with_rationales(suite.cases(), &explanation, &HashSet::new(), None))?;
        suite.submit_for_review()?;

        let backend_actor = Actor::Backend(backend.backend_id().to_string());
        journal.record(EventDraft::new(
            backend_actor.clone(),
            actions::SUITE_DRAFTED,
            vec![refs::spec(&spec.id, spec.version), refs::suite(&spec.id, version)],
            serde_json::to_value(&suite).unwrap_or(Value::Null),
        ))?;
        journal.record(EventDraft::new(
            backend_actor,
            actions::EXPLANATION_ATTACHED,
            vec![refs::suite(&spec.id, version)],
            serde_json::to_value(&explanation).unwrap_or(Value::Null),
        ))?;

        let session = ReviewSession {
            piece_id: spec.id.clone(),
            current_suite: suite,
            current_explanation: explanation,
            round: 1,
            history: Vec::new(),
        };
        Ok(self.sessions.entry(spec.id.clone()).or_insert(session))
    }

    /// Applies one round of feedback. On any error the session is unchanged.
    pub fn apply_feedback(
        &mut self,
        spec: &PieceSpec,
        feedback: Vec<FeedbackItem>,
        expert: &str,
        backend: &mut dyn Backend,
        templates: &Templates,
        journal: &mut dyn Journal,
    ) -> Result<&ReviewSession, ReviewError> {
        let session = self.sessions.get(&spec.id).ok_or_else(|| ReviewError::NoSession(spec.id.clone()))?;
        if feedback.is_empty() {
            return Err(ReviewError::EmptyFeedback);
        }
        // Reject unknown ids before anything reaches the backend.
        apply_structured_feedback(session.current_suite.cases(), &feedback)?;

        let old = &session.current_suite;
        let mut next = revise_tests(spec, old, &feedback, &templates.revise_tests, backend)?;
        let old_digests: HashMap<&str, String> =
            old.cases().iter().map(|c| (c.case_id.as_str(), c.behaviour_digest())).collect();
        let changed: HashSet<String> = next
            .cases()
            .iter()
            .filter(|c| old_digests.get(c.case_id.as_str()) != Some(&c.behaviour_digest()))
            .map(|c| c.case_id.clone())
            .collect();

        let explanation = if changed.is_empty() {
            SuiteExplanation {
                piece_id: spec.id.clone(),
                per_case: next
                    .cases()
                    .iter()
                    .filter_map(|c| session.current_explanation.get(&c.case_id).cloned())
                    .collect(),
                coverage_notes: session.current_explanation.coverage_notes.clone(),
            }
        } else {
            let subset: Vec<TestCase> = next.cases().iter().filter(|c| changed.contains(&c.case_id)).cloned().collect();
            let partial = TestSuite::draft(&spec.id, next.suite_version(), subset)?;
            let fresh = explain_tests(spec, &partial, &templates.explain_tests, backend)?;
            SuiteExplanation {
                piece_id: spec.id.clone(),
                per_case: next
                    .cases()
                    .iter()
                    .filter_map(|c| {
                        if changed.contains(&c.case_id) {
                            fresh.get(&c.case_id).cloned()
                        } else {
                            session.current_explanation.get(&c.case_id).cloned()
                        }
                    })
                    .collect(),
                coverage_notes: fresh.coverage_notes,
            }
        };
        let previous_rationales: HashMap<&str, &str> =
            old.cases().iter().map(|c| (c.case_id.as_str(), c.rationale.as_str())).collect();
        next.set_cases(with_rationales(next.cases(), &explanation, &changed, Some(&previous_rationales)))?;
        next.submit_for_review()?;

        let version = next.suite_version();
        let mut events = vec![EventDraft::new(
            Actor::Expert(expert.to_string()),
            actions::FEEDBACK_APPLIED,
            vec![refs::suite(&spec.id, old.suite_version()), refs::suite(&spec.id, version)],
            json!({ "round": session.round, "feedback": feedback, "suite_version": version }),
        )];
        if !changed.is_empty() {
            let mut regenerated: Vec<&String> = changed.iter().collect();
            regenerated.sort();
            events.push(EventDraft::new(
                Actor::Backend(backend.backend_id().to_string()),
                actions::EXPLANATION_ATTACHED,
                vec![refs::suite(&spec.id, version)],
                json!({ "regenerated": regenerated, "explanation": explanation }),
            ));
        }
        for e in events {
            journal.record(e)?;
        }

        let session = self.sessions.get_mut(&spec.id).expect("checked above");
        session.history.push(ReviewRound { round: session.round, feedback, suite_version: version });
        session.round += 1;
        session.current_suite = next;
        session.current_explanation = explanation;
        Ok(session)
    }

    /// Freezes the current suite and closes the session.
    pub fn approve(&mut self, piece_id: &str, approver: &str, journal: &mut dyn Journal) -> Result<TestSuite, ReviewError> {
        let session = self.sessions.get(piece_id).ok_or_else(|| ReviewError::NoSession(piece_id.to_string()))?;
        if approver.trim().is_empty() {
            return Err(ReviewError::Rejected("approver identity is required".into()));
        }
        if session.current_suite.cases().is_empty() {
            return Err(ReviewError::Rejected("suite has no cases".into()));
        }
        let mut suite = session.current_suite.clone();
        suite.approve(approver, Utc::now())?;
        journal.record(EventDraft::new(
            Actor::Expert(approver.to_string()),
            actions::SUITE_APPROVED,
            vec![refs::suite(piece_id, suite.suite_version())],
            json!({ "suite_hash": suite.content_hash(), "round": session.round }),
        ))?;
        self.sessions.remove(piece_id);
        self.approved.insert(piece_id.to_string(), suite.clone());
        Ok(suite)
    }
}

/// Copies explanation reasoning into case rationales. Cases outside
/// `regenerate` keep a non-empty rationale; an expert-edited rationale on a
/// changed case (differs from `previous`) is kept too.
fn with_rationales(
    cases: &[TestCase],
    explanation: &SuiteExplanation,
    regenerate: &HashSet<String>,
    previous: Option<&HashMap<&str, &str>>,
) -> Vec<TestCase> {
    cases
        .iter()
        .map(|c| {
            let mut c = c.clone();
            let expert_edited = previous
                .and_then(|p| p.get(c.case_id.as_str()))
                .is_some_and(|old| !c.rationale.is_empty() && *old != c.rationale);
            let replace = c.rationale.trim().is_empty() || (regenerate.contains(&c.case_id) && !expert_edited);
            if replace {
                if let Some(e) = explanation.get(&c.case_id) {
                    c.rationale = e.reasoning.clone();
                }
            }
            c
        })
        .collect()
}

/// Suite state after an operation, for state-machine checks.
pub fn observed_state(board: &ReviewBoard, piece_id: &str) -> Option<SuiteState> {
    board
        .session(piece_id)
        .map(|s| s.current_suite.state())
        .or_else(|| board.approved(piece_id).map(|s| s.state()))
}
