//! Expert-guided program synthesis: reviewed test suites, a bounded
//! generate-and-repair loop, and composition of verified pieces into graphs.

pub mod backend;
pub mod compose;
pub mod journal;
pub mod model;
pub mod review;
pub mod sandbox;
pub mod service;
pub mod store;
pub mod synth;

pub use model::{CodeCandidate, ComparisonMode, PieceSpec, SuiteState, TestCase, TestSuite};
pub use store::{AuditEvent, HistoryFilter, Project, ProjectConfig, StoreError};
