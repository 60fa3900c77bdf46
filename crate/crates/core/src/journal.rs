//! Where pipeline operations report what they did.
//!
//! The project store implements [`Journal`] on disk; [`MemoryJournal`] keeps
//! everything in memory for tests and dry runs.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compose::TraceRecord;
use crate::model::CodeCandidate;
use crate::synth::RunState;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Expert(String),
    Backend(String),
    System,
}

impl std::fmt::Display for Actor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Actor::Expert(who) => write!(f, "expert:{who}"),
            Actor::Backend(id) => write!(f, "backend:{id}"),
            Actor::System => f.write_str("system"),
        }
    }
}

/// An audit event before the store assigns its sequence number and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDraft {
    pub actor: Actor,
    pub action: String,
    pub refs: Vec<String>,
    pub payload: Value,
}

impl EventDraft {
    pub fn new(actor: Actor, action: &str, refs: Vec<String>, payload: Value) -> Self {
        Self { actor, action: action.to_string(), refs, payload }
    }
}

pub mod actions {
    pub const SPEC_ADDED: &str = "SpecAdded";
    pub const SUITE_DRAFTED: &str = "SuiteDrafted";
    pub const EXPLANATION_ATTACHED: &str = "ExplanationAttached";
    pub const FEEDBACK_APPLIED: &str = "FeedbackApplied";
    pub const SUITE_APPROVED: &str = "SuiteApproved";
    pub const CANDIDATE_PRODUCED: &str = "CandidateProduced";
    pub const RUN_COMPLETED: &str = "RunCompleted";
    pub const GRAPH_UPDATED: &str = "GraphUpdated";
    pub const FAULT_LOCALIZED: &str = "FaultLocalized";
}

/// Reference strings used in `refs`: `kind:id[@version]`.
pub mod refs {
    pub fn spec(piece: &str, version: u32) -> String {
        format!("spec:{piece}@{version}")
    }

    pub fn suite(piece: &str, version: u32) -> String {
        format!("suite:{piece}@{version}")
    }

    pub fn candidate(piece: &str, candidate_id: &str) -> String {
        format!("candidate:{piece}/{candidate_id}")
    }

    pub fn graph(graph_id: &str) -> String {
        format!("graph:{graph_id}")
    }

    pub fn trace(run_id: &str) -> String {
        format!("trace:{run_id}")
    }

    /// Whether `r` names an artifact belonging to `piece`.
    pub fn mentions_piece(r: &str, piece: &str) -> bool {
        let Some((_, id)) = r.split_once(':') else { return false };
        id == piece
            || id.strip_prefix(piece).is_some_and(|rest| rest.starts_with('@') || rest.starts_with('/'))
    }
}

/// Sortable, unique run identifier: UTC timestamp plus a random suffix.
pub fn new_run_id() -> String {
    use rand::Rng;
    let suffix: u32 = rand::thread_rng().gen();
    format!("{}-{suffix:08x}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"))
}

#[derive(Debug, thiserror::Error)]
#[error("journal write failed: {0}")]
pub struct JournalError(pub String);

pub trait Journal {
    fn record(&mut self, event: EventDraft) -> Result<(), JournalError>;

    fn save_candidate(&mut self, _piece_id: &str, _candidate: &CodeCandidate, _extension: &str) -> Result<(), JournalError> {
        Ok(())
    }

    fn save_run_state(&mut self, _state: &RunState) -> Result<(), JournalError> {
        Ok(())
    }

    fn save_trace(&mut self, _trace: &TraceRecord) -> Result<(), JournalError> {
        Ok(())
    }
}

#[derive(Debug, Default, Clone)]
pub struct MemoryJournal {
    pub events: Vec<EventDraft>,
    pub candidates: Vec<(String, CodeCandidate)>,
    pub run_states: Vec<RunState>,
    pub traces: Vec<TraceRecord>,
}

impl MemoryJournal {
    pub fn actions(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.action.as_str()).collect()
    }

    pub fn count(&self, action: &str) -> usize {
        self.events.iter().filter(|e| e.action == action).count()
    }
}

impl Journal for MemoryJournal {
    fn record(&mut self, event: EventDraft) -> Result<(), JournalError> {
        self.events.push(event);
        Ok(())
    }

    fn save_candidate(&mut self, piece_id: &str, candidate: &CodeCandidate, _extension: &str) -> Result<(), JournalError> {
        self.candidates.push((piece_id.to_string(), candidate.clone()));
        Ok(())
    }

    fn save_run_state(&mut self, state: &RunState) -> Result<(), JournalError> {
        self.run_states.push(state.clone());
        Ok(())
    }

    fn save_trace(&mut self, trace: &TraceRecord) -> Result<(), JournalError> {
        self.traces.push(trace.clone());
        Ok(())
    }
}

impl<J: Journal + ?Sized> Journal for &mut J {
    fn record(&mut self, event: EventDraft) -> Result<(), JournalError> {
        (**self).record(event)
    }

    fn save_candidate(&mut self, piece_id: &str, candidate: &CodeCandidate, extension: &str) -> Result<(), JournalError> {
        (**self).save_candidate(piece_id, candidate, extension)
    }

    fn save_run_state(&mut self, state: &RunState) -> Result<(), JournalError> {
        (**self).save_run_state(state)
    }

    fn save_trace(&mut self, trace: &TraceRecord) -> Result<(), JournalError> {
        (**self).save_trace(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::refs::*;

    #[test]
    fn piece_refs() {
        assert!(mentions_piece(&suite("sum", 2), "sum"));
        assert!(mentions_piece(&candidate("sum", "abc"), "sum"));
        assert!(!mentions_piece(&suite("sum-two", 2), "sum"));
        assert!(!mentions_piece(&graph("sum"), "su"));
    }
}
