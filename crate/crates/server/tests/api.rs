use std::net::SocketAddr;
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use pieceforge_core::backend::{BackendConfig, RequestKind, Script};
use pieceforge_core::sandbox::RunnerProfile;
use pieceforge_core::service::Service;
use pieceforge_core::{PieceSpec, Project, ProjectConfig};
use pieceforge_server::{serve_blocking, ServerConfig};
use reqwest::blocking::{Client, Response};
use serde_json::{json, Value};

const TOKEN: &str = "secret-token";

fn py_source(expr: &str) -> String {
    format!("import sys, json\nn = json.loads(sys.stdin.readline())[\"n\"]\nprint(json.dumps({expr}))\n")
}

fn fenced(source: &str) -> String {
    format!("```python\n{source}```\n")
}

fn script() -> Script {
    let mut s = Script::default();
    s.push(RequestKind::GenerateCode, fenced(&py_source("n")))
        .push(RequestKind::RepairCode, fenced(&py_source("n + 1")))
        .push(
            RequestKind::GenerateTests,
            format!(
                "```json\n{}\n```",
                json!({"cases": [
                    {"case_id": "zero", "input": {"n": 0}, "expected": 1},
                    {"case_id": "big", "input": {"n": 100}, "expected": 1000}
                ]})
            ),
        );
    for ids in [vec!["zero", "big"], vec!["big"]] {
        let per_case: Vec<Value> =
            ids.iter().map(|id| json!({"case_id": id, "summary": "s", "reasoning": "r"})).collect();
        s.push(RequestKind::ExplainTests, format!("```json\n{}\n```", json!({"per_case": per_case, "coverage_notes": ""})));
    }
    s
}

struct Server {
    base: String,
    client: Client,
    _dir: tempfile::TempDir,
}

impl Server {
    fn start(poll: Duration) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let script_path = dir.path().join("script.json");
        std::fs::write(&script_path, serde_json::to_string(&script()).unwrap()).unwrap();
        let mut config = ProjectConfig::default();
        config.backends.push(BackendConfig::scripted("scripted", &script_path));
        config.runner_profiles.push(RunnerProfile::new("py", &["python3", "{file}"], ".py"));
        let svc = Arc::new(Service::new(Project::init(&dir.path().join("p"), &config).unwrap()));
        svc.add_spec(PieceSpec {
            id: "inc".into(),
            title: "inc".into(),
            description: "Add one.".into(),
            hints: vec![],
            input_shape: "{\"n\": integer}".into(),
            output_shape: "integer".into(),
            runner_profile: "py".into(),
            version: 1,
        })
        .unwrap();
        let static_dir = dir.path().join("ui");
        std::fs::create_dir(&static_dir).unwrap();
        std::fs::write(static_dir.join("index.html"), "<p>ui</p>").unwrap();
        let cfg = ServerConfig { token: TOKEN.into(), poll_limit: poll, static_dir: Some(static_dir) };
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            serve_blocking("127.0.0.1:0".parse().unwrap(), svc, cfg, |addr: SocketAddr| tx.send(addr).unwrap()).unwrap()
        });
        let addr = rx.recv_timeout(Duration::from_secs(10)).unwrap();
        Server { base: format!("http://{addr}"), client: Client::new(), _dir: dir }
    }

    fn get(&self, path: &str) -> Response {
        self.client.get(format!("{}/api/v1{path}", self.base)).bearer_auth(TOKEN).send().unwrap()
    }

    fn post(&self, path: &str, body: Value) -> Response {
        self.client.post(format!("{}/api/v1{path}", self.base)).bearer_auth(TOKEN).json(&body).send().unwrap()
    }
}

fn ok(r: Response) -> Value {
    let status = r.status();
    let body: Value = r.json().unwrap();
    assert!(status.is_success(), "{status}: {body}");
    body
}

fn error(r: Response, code: u16) -> Value {
    assert_eq!(r.status().as_u16(), code);
    r.json().unwrap()
}

#[test]
fn review_flow_and_conflicts() {
    let s = Server::start(Duration::from_secs(5));
    let pieces = ok(s.get("/pieces"));
    assert_eq!(pieces[0]["spec"]["id"], "inc");

    let session = ok(s.post("/pieces/inc/review", json!(null)));
    assert_eq!(session["current_suite"]["state"], "UnderReview");
    assert_eq!(session["current_explanation"]["per_case"].as_array().unwrap().len(), 2);
    assert_eq!(ok(s.get("/pieces/inc/review")), session);

    let err = error(s.post("/pieces/inc/review/feedback", json!([{"kind": "explode"}])), 400);
    assert_eq!(err["error"], "invalid");

    let after = ok(s.post(
        "/pieces/inc/review/feedback",
        json!([{"kind": "modify_case", "case_id": "big", "case": {"expected": 101}}]),
    ));
    assert_eq!(after["current_suite"]["suite_version"], 2);

    let approved = ok(s.post("/pieces/inc/review/approve", json!({"approver": "ann"})));
    assert_eq!(approved["state"], "Approved");
    assert_eq!(approved["approved_by"], "ann");

    let again = error(s.post("/pieces/inc/review/approve", json!({})), 409);
    assert_eq!(again["error"], "conflict");
    let closed = error(s.post("/pieces/inc/review/feedback", json!([{"kind": "remove_case", "case_id": "zero"}])), 409);
    assert_eq!(closed["error"], "conflict");

    let piece = ok(s.get("/pieces/inc"));
    assert_eq!(piece["approved_version"], 2);

    assert_eq!(error(s.get("/pieces/nope"), 404)["error"], "not_found");
    assert_eq!(error(s.get("/graphs/nope"), 404)["error"], "not_found");
    assert_eq!(error(s.get("/no/such/thing"), 404)["error"], "not_found");
}

#[test]
fn synthesis_runs_are_polled_to_completion() {
    let s = Server::start(Duration::from_secs(5));
    ok(s.post("/pieces/inc/review", json!(null)));
    ok(s.post(
        "/pieces/inc/review/feedback",
        json!([{"kind": "modify_case", "case_id": "big", "case": {"expected": 101}}]),
    ));
    ok(s.post("/pieces/inc/review/approve", json!(null)));

    assert_eq!(error(s.post("/pieces/inc/synthesize", json!({"bogus": 1})), 400)["error"], "invalid");
    let run_id = ok(s.post("/pieces/inc/synthesize", json!({"max_iterations": 4})))["run_id"].as_str().unwrap().to_string();

    let mut seq = 0;
    let deadline = Instant::now() + Duration::from_secs(60);
    let status = loop {
        let status = ok(s.get(&format!("/runs/{run_id}?after_seq={seq}")));
        let next = status["seq"].as_u64().unwrap();
        assert!(next >= seq);
        seq = next;
        if status["state"] != "running" {
            break status;
        }
        assert!(Instant::now() < deadline, "run never finished");
    };
    assert_eq!(status["state"], "success");
    assert_eq!(status["progress"]["current"], 2);
    assert!(status["winner"].is_string());

    let events = ok(s.get("/events"));
    let actions: Vec<&str> = events.as_array().unwrap().iter().map(|e| e["action"].as_str().unwrap()).collect();
    assert!(actions.contains(&"RunCompleted"));
    assert_eq!(error(s.get("/runs/x?after_seq=-1"), 400)["error"], "invalid");
}

#[test]
fn event_poll_returns_when_the_timeout_passes() {
    let s = Server::start(Duration::from_millis(300));
    let last = ok(s.get("/events")).as_array().unwrap().last().unwrap()["seq"].as_u64().unwrap();
    let t = Instant::now();
    let none = ok(s.get(&format!("/events?after_seq={last}")));
    assert!(none.as_array().unwrap().is_empty());
    assert!(t.elapsed() >= Duration::from_millis(250));
}

#[test]
fn api_requires_the_bearer_token() {
    let s = Server::start(Duration::from_secs(1));
    let url = format!("{}/api/v1/pieces", s.base);
    let none = s.client.get(&url).send().unwrap();
    assert_eq!(error(none, 401)["error"], "unauthorized");
    let wrong = s.client.get(&url).bearer_auth("nope").send().unwrap();
    assert_eq!(wrong.status().as_u16(), 401);
    // static assets need no token
    let page = s.client.get(format!("{}/index.html", s.base)).send().unwrap();
    assert_eq!(page.text().unwrap(), "<p>ui</p>");
}

#[test]
fn graph_endpoints_validate_bodies() {
    let s = Server::start(Duration::from_secs(1));
    assert_eq!(error(s.post("/graphs/g/run", json!({"inputs": {}})), 404)["error"], "not_found");
    assert_eq!(error(s.post("/graphs/g/run", json!([1])), 400)["error"], "invalid");
    assert_eq!(error(s.post("/graphs/g/localize", json!({})), 400)["error"], "invalid");
}

#[test]
fn server_binds_ephemeral_ports_independently() {
    let a = Server::start(Duration::from_secs(1));
    let b = Server::start(Duration::from_secs(1));
    assert_ne!(a.base, b.base);
}
