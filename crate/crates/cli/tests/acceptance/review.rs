//! Random operation sequences against the suite state machine, first on
//! bare suites with a reference model, then through review sessions and
//! the store.

use std::collections::BTreeMap;

use chrono::Utc;
use pieceforge_core::backend::{Backend, BackendError, RequestKind, Templates};
use pieceforge_core::journal::MemoryJournal;
use pieceforge_core::review::{CasePatch, FeedbackItem, ReviewBoard};
use pieceforge_core::{PieceSpec, Project, ProjectConfig, SuiteState, TestCase, TestSuite};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use crate::*;

fn legal(from: SuiteState, to: SuiteState) -> bool {
    use SuiteState::*;
    matches!((from, to), (Draft, Draft) | (Draft, UnderReview) | (UnderReview, UnderReview) | (UnderReview, Approved) | (Approved, Approved))
}

fn random_cases(rng: &mut StdRng) -> Vec<TestCase> {
    let n = rng.gen_range(0..=3);
    // ids from a small alphabet so duplicates happen
    (0..n).map(|_| TestCase::new(format!("c{}", rng.gen_range(0..4)), json!(rng.gen_range(0..9)), json!(1))).collect()
}

/// One sequence on a bare suite, every result checked against the model.
fn suite_sequence(rng: &mut StdRng, transitions: &mut usize) -> Result<(), String> {
    let mut suite = TestSuite::draft("p", 1, vec![TestCase::new("c0", json!(0), json!(1))]).unwrap();
    let mut approved: Vec<(TestSuite, String)> = Vec::new();
    for step in 0..rng.gen_range(1..=24) {
        let before = suite.state();
        let op = rng.gen_range(0..5);
        let ok = match op {
            0 => {
                let cases = random_cases(rng);
                let unique = cases.iter().map(|c| &c.case_id).collect::<std::collections::HashSet<_>>().len() == cases.len();
                let expect = before == SuiteState::Draft && unique;
                let got = suite.set_cases(cases).is_ok();
                (expect, got)
            }
            1 => {
                let expect = before == SuiteState::Draft && !suite.cases().is_empty();
                (expect, suite.submit_for_review().is_ok())
            }
            2 => {
                let expect = before == SuiteState::UnderReview && !suite.cases().is_empty();
                let got = suite.approve("ann", Utc::now()).is_ok();
                if got {
                    approved.push((suite.clone(), suite.content_hash()));
                }
                (expect, got)
            }
            3 => {
                suite = suite.next_version();
                (true, true)
            }
            _ => {
                // every mutation of an approved suite is refused
                if let Some((s, _)) = approved.last_mut() {
                    let refused = s.set_cases(vec![]).is_err()
                        && s.submit_for_review().is_err()
                        && s.approve("mallory", Utc::now()).is_err();
                    (true, refused)
                } else {
                    (true, true)
                }
            }
        };
        if ok.0 != ok.1 {
            return Err(format!("step {step} op {op} from {before:?}: model says {}, suite says {}", ok.0, ok.1));
        }
        if op != 3 {
            if !legal(before, suite.state()) {
                return Err(format!("illegal transition {before:?} -> {:?}", suite.state()));
            }
            *transitions += 1;
        } else if suite.state() != SuiteState::Draft {
            return Err("a new version does not start as Draft".into());
        }
        for (s, hash) in &approved {
            if &s.content_hash() != hash || s.state() != SuiteState::Approved {
                return Err(format!("approved v{} changed", s.suite_version()));
            }
        }
    }
    Ok(())
}

/// Answers like a cooperative backend: explanations cover exactly the
/// cases named in the prompt.
struct EchoBackend {
    rng: StdRng,
    fresh: u32,
}

impl EchoBackend {
    fn case_ids(prompt: &str) -> Vec<String> {
        let marker = "\"case_id\":\"";
        let mut ids: Vec<String> = Vec::new();
        for (at, _) in prompt.match_indices(marker) {
            let rest = &prompt[at + marker.len()..];
            if let Some(end) = rest.find('"') {
                let id = rest[..end].to_string();
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
        }
        ids
    }

    fn fresh_case(&mut self) -> Value {
        self.fresh += 1;
        json!({"case_id": format!("g{}", self.fresh), "input": {"n": self.rng.gen_range(0..50)}, "expected": self.rng.gen_range(0..50)})
    }
}

impl Backend for EchoBackend {
    fn backend_id(&self) -> &str {
        "echo"
    }

    fn max_retries(&self) -> u32 {
        0
    }

    fn complete(&mut self, kind: RequestKind, prompt: &str) -> Result<String, BackendError> {
        if self.rng.gen_ratio(1, 40) {
            return Err(BackendError::Unreachable("simulated outage".into()));
        }
        let doc = match kind {
            RequestKind::GenerateTests | RequestKind::ReviseTests => {
                let n = if kind == RequestKind::GenerateTests { self.rng.gen_range(1..=3) } else { 1 };
                json!({ "cases": (0..n).map(|_| self.fresh_case()).collect::<Vec<_>>() })
            }
            RequestKind::ExplainTests => {
                let per_case: Vec<Value> =
                    Self::case_ids(prompt).into_iter().map(|id| json!({"case_id": id, "reasoning": "because"})).collect();
                json!({ "per_case": per_case })
            }
            other => return Err(BackendError::Protocol(format!("unexpected {other:?}"))),
        };
        Ok(format!("```json\n{doc}\n```"))
    }
}

fn random_feedback(rng: &mut StdRng, suite: Option<&TestSuite>) -> FeedbackItem {
    let ids: Vec<String> = suite.map(|s| s.cases().iter().map(|c| c.case_id.clone()).collect()).unwrap_or_default();
    let some_id = |rng: &mut StdRng| {
        if ids.is_empty() || rng.gen_ratio(1, 5) {
            "ghost".to_string()
        } else {
            ids[rng.gen_range(0..ids.len())].clone()
        }
    };
    match rng.gen_range(0..4) {
        0 => FeedbackItem::AddCase { case: TestCase::new(format!("e{}", rng.gen_range(0..6)), json!({"n": 1}), json!(2)) },
        1 => FeedbackItem::RemoveCase { case_id: some_id(rng) },
        2 => FeedbackItem::ModifyCase {
            case_id: some_id(rng),
            case: CasePatch { expected: Some(json!(rng.gen_range(0..9))), ..Default::default() },
        },
        _ => FeedbackItem::FreeText { text: "cover a larger input".into() },
    }
}

/// One sequence through a review board; approved suites go to the store.
fn board_sequence(
    rng: &mut StdRng,
    piece: &str,
    store: &Project,
    frozen: &mut BTreeMap<(String, u32), String>,
    transitions: &mut usize,
) -> Result<(), String> {
    let spec = PieceSpec {
        id: piece.into(),
        title: piece.into(),
        description: "Some piece.".into(),
        hints: vec![],
        input_shape: String::new(),
        output_shape: String::new(),
        runner_profile: "fixture".into(),
        version: 1,
    };
    let mut board = ReviewBoard::new();
    let mut backend = EchoBackend { rng: StdRng::seed_from_u64(rng.gen()), fresh: 0 };
    let templates = Templates::default();
    let mut journal = MemoryJournal::default();
    let mut states: BTreeMap<u32, SuiteState> = BTreeMap::new();
    let mut observe = |suite: &TestSuite, transitions: &mut usize| -> Result<(), String> {
        let v = suite.suite_version();
        if let Some(prev) = states.get(&v) {
            if !legal(*prev, suite.state()) {
                return Err(format!("{piece} v{v}: {prev:?} -> {:?}", suite.state()));
            }
            *transitions += 1;
        } else if let Some((last, _)) = states.iter().next_back() {
            if v < *last {
                return Err(format!("{piece}: version went back from {last} to {v}"));
            }
        }
        states.insert(v, suite.state());
        Ok(())
    };

    for _ in 0..rng.gen_range(1..=16) {
        let before_session = board.session(piece).cloned();
        let before_approved = board.approved(piece).cloned();
        let result = match rng.gen_range(0..10) {
            0..=2 => board.start_review(&spec, &mut backend, &templates, &mut journal).map(|_| ()),
            3..=7 => {
                let items = (0..rng.gen_range(1..=2))
                    .map(|_| random_feedback(rng, before_session.as_ref().map(|s| &s.current_suite)))
                    .collect();
                board.apply_feedback(&spec, items, "ann", &mut backend, &templates, &mut journal).map(|_| ())
            }
            _ => {
                let who = if rng.gen_ratio(1, 6) { "  " } else { "ann" };
                board.approve(piece, who, &mut journal).map(|suite| {
                    let key = (piece.to_string(), suite.suite_version());
                    frozen.insert(key, suite.content_hash());
                })
            }
        };
        if result.is_err() {
            // a refused operation changes nothing
            if board.session(piece) != before_session.as_ref() || board.approved(piece) != before_approved.as_ref() {
                return Err(format!("{piece}: a failed operation changed the board"));
            }
            continue;
        }
        if let Some(s) = board.session(piece) {
            if s.current_suite.state() != SuiteState::UnderReview {
                return Err(format!("{piece}: session holds a {:?} suite", s.current_suite.state()));
            }
            observe(&s.current_suite, transitions)?;
        }
        if let Some(a) = board.approved(piece) {
            observe(a, transitions)?;
            if board.approved(piece) != before_approved.as_ref() {
                store.put_suite(a).map_err(|e| e.to_string())?;
                // a second, different write of the same approved version is refused
                let mut tampered = serde_json::to_value(a).unwrap();
                tampered["cases"][0]["expected"] = json!("tampered");
                let tampered: TestSuite = serde_json::from_value(tampered).unwrap();
                if store.put_suite(&tampered).is_ok() {
                    return Err(format!("{piece} v{}: store accepted a rewrite", a.suite_version()));
                }
            }
            let hash = &frozen[&(piece.to_string(), a.suite_version())];
            if &a.content_hash() != hash {
                return Err(format!("{piece} v{}: approved hash changed", a.suite_version()));
            }
        }
    }
    Ok(())
}

pub fn review_state_machine() -> Check {
    let mut rng = StdRng::seed_from_u64(SEED ^ 0x7e57);
    let mut transitions = 0;
    for i in 0..REVIEW_SEQUENCES {
        suite_sequence(&mut rng, &mut transitions).map_err(|e| format!("suite sequence {i}: {e}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Project::init(&dir.path().join("proj"), &ProjectConfig::default()).map_err(|e| e.to_string())?;
    let mut frozen = BTreeMap::new();
    for i in 0..REVIEW_SEQUENCES {
        let piece = format!("p{i}");
        board_sequence(&mut rng, &piece, &store, &mut frozen, &mut transitions)
            .map_err(|e| format!("board sequence {i}: {e}"))?;
    }
    // what was approved is still byte-for-byte what is on disk
    for ((piece, version), hash) in &frozen {
        let stored = store.get_suite(piece, *version).map_err(|e| e.to_string())?;
        if &stored.content_hash() != hash {
            return Err(format!("{piece} v{version}: stored hash differs"));
        }
    }
    if frozen.is_empty() {
        return Err("no sequence reached approval".into());
    }
    Ok(format!(
        "{} sequences ({REVIEW_SEQUENCES} on bare suites, {REVIEW_SEQUENCES} through review sessions), {transitions} observed transitions all legal, {} approved suites with unchanged hashes",
        2 * REVIEW_SEQUENCES,
        frozen.len()
    ))
}
