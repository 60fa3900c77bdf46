//! `pieceforge`: specs in, reviewed tests and working pieces out.

mod review;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, CommandFactory, Parser, Subcommand};
use pieceforge_core::compose::{CompositionGraph, IntegrationTest};
use pieceforge_core::journal::actions;
use pieceforge_core::model::to_canonical;
use pieceforge_core::sandbox::ExecStatus;
use pieceforge_core::service::{Service, ServiceError, SynthesisOptions, DEFAULT_EXPERT};
use pieceforge_core::synth::LoopStatus;
use pieceforge_core::{HistoryFilter, PieceSpec, Project, ProjectConfig, StoreError};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "pieceforge", version, about = "Test-first piece production from natural-language specs")]
struct Cli {
    /// Print exactly one canonical JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Project directory; defaults to the nearest ancestor holding project.json.
    #[arg(long, global = true, value_name = "DIR")]
    project: Option<PathBuf>,
    /// Reclaim a lock left behind by a dead process.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty project.
    Init {
        /// project.json to start from.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    /// Register piece specs.
    #[command(subcommand)]
    Spec(SpecCmd),
    /// Draft, review and approve a piece's test suite.
    #[command(subcommand)]
    Tests(TestsCmd),
    /// Synthesize code against the approved suite.
    #[command(subcommand)]
    Code(CodeCmd),
    /// Run the selected candidate of a piece on one input.
    Run {
        piece: String,
        #[arg(long, value_name = "JSON")]
        input: String,
    },
    /// Composition graphs.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Run a graph's integration suite.
    Integrate { graph: String },
    /// Find the node where a failing integration test goes wrong.
    Localize {
        graph: String,
        test: String,
        /// Run id of a known-good trace to compare against.
        #[arg(long, value_name = "RUN")]
        reference: Option<String>,
    },
    /// Audit events touching a piece (all events when omitted).
    History { piece: Option<String> },
    /// Serve the HTTP API (and web UI assets) on localhost.
    Serve {
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SpecCmd {
    /// Add or update a piece spec from a JSON file.
    Add { file: PathBuf },
}

#[derive(Subcommand)]
enum TestsCmd {
    /// Draft a suite and open its review.
    Gen { piece: String },
    /// Review interactively: add, rm, mod, say, approve, quit.
    Review {
        piece: String,
        #[arg(long, default_value = DEFAULT_EXPERT)]
        expert: String,
    },
    /// Approve the suite under review.
    Approve {
        piece: String,
        #[arg(long, default_value = DEFAULT_EXPERT)]
        approver: String,
    },
}

#[derive(Subcommand)]
enum CodeCmd {
    /// Produce code that passes the approved suite.
    Gen(CodeGen),
}

#[derive(Args)]
struct CodeGen {
    piece: String,
    /// Maximum repair iterations.
    #[arg(long, value_name = "N")]
    budget: Option<u32>,
    /// Independent candidates to rank (pool mode when above 1).
    #[arg(long, value_name = "N")]
    candidates: Option<u32>,
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Validate a graph's structure and pins.
    Check { graph: String },
    /// Execute a graph once.
    Run {
        graph: String,
        #[arg(long, value_name = "JSON")]
        inputs: Option<String>,
    },
    /// Add or replace a graph from a JSON file.
    Add { file: PathBuf },
    /// Set a graph's integration tests from a JSON file.
    Tests { graph: String, file: PathBuf },
}

/// What a command printed and how the process should exit.
struct Outcome {
    doc: Value,
    human: String,
    failed: bool,
}

impl Outcome {
    fn ok(doc: Value, human: impl Into<String>) -> Self {
        Self { doc, human: human.into(), failed: false }
    }

    fn domain(doc: Value, human: impl Into<String>, failed: bool) -> Self {
        Self { doc, human: human.into(), failed }
    }
}

struct Failure {
    exit: u8,
    code: &'static str,
    detail: String,
}

impl Failure {
    fn usage(detail: impl Into<String>) -> Self {
        Self { exit: 2, code: "usage", detail: detail.into() }
    }

    fn environment(detail: impl Into<String>) -> Self {
        Self { exit: 3, code: "environment", detail: detail.into() }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let exit = match e {
            ServiceError::Invalid(_) | ServiceError::NotFound(_) => 2,
            ServiceError::Conflict(_) => 1,
            ServiceError::Backend(_) | ServiceError::Environment(_) => 3,
        };
        Self { exit, code: e.code(), detail: e.to_string() }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        ServiceError::from(e).into()
    }
}

type CmdResult = Result<Outcome, Failure>;

fn to_value(v: &impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn parse_json<T: DeserializeOwned>(what: &str, text: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::usage(format!("{what}: {e}")))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    parse_json(&path.display().to_string(), &text)
}

fn project_root(cli: &Cli) -> Result<PathBuf, Failure> {
    match &cli.project {
        Some(p) => Ok(p.clone()),
        None => {
            let cwd = std::env::current_dir().map_err(|e| Failure::environment(e.to_string()))?;
            Project::discover(&cwd)
                .ok_or_else(|| Failure::environment("no project.json here or in any parent; run `pieceforge init`"))
        }
    }
}

fn open(cli: &Cli) -> Result<Arc<Service>, Failure> {
    Ok(Arc::new(Service::open(&project_root(cli)?, cli.force)?))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    let result = dispatch(&cli);
    let mut stdout = std::io::stdout().lock();
    let exit = match result {
        Ok(out) => {
            if cli.json {
                let _ = writeln!(stdout, "{}", to_canonical(&out.doc).expect("canonical output"));
            } else if !out.human.is_empty() {
                let _ = writeln!(stdout, "{}", out.human.trim_end());
            }
            u8::from(out.failed)
        }
        Err(f) => {
            if cli.json {
                let doc = json!({"error": f.code, "detail": f.detail});
                let _ = writeln!(stdout, "{}", to_canonical(&doc).expect("canonical output"));
            }
            eprintln!("error: {}", f.detail);
            f.exit
        }
    };
    let _ = stdout.flush();
    ExitCode::from(exit)
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Init { config } => init(cli, config.as_deref()),
        Command::Spec(SpecCmd::Add { file }) => {
            let spec: PieceSpec = read_json(file)?;
            let stored = open(cli)?.add_spec(spec)?;
            let human = format!("{} stored at version {}", stored.id, stored.version);
            Ok(Outcome::ok(to_value(&stored), human))
        }
        Command::Tests(TestsCmd::Gen { piece }) => {
            let session = open(cli)?.start_review(piece)?;
            let human = review::render(&session);
            Ok(Outcome::ok(to_value(&session), human))
        }
        Command::Tests(TestsCmd::Review { piece, expert }) => {
            let svc = open(cli)?;
            review::interactive(&svc, piece, expert, cli.json)
        }
        Command::Tests(TestsCmd::Approve { piece, approver }) => {
            let suite = open(cli)?.approve(piece, approver)?;
            let human = format!("{piece}: suite v{} approved by {approver}", suite.suite_version());
            Ok(Outcome::ok(to_value(&suite), human))
        }
        Command::Code(CodeCmd::Gen(args)) => code_gen(cli, args),
        Command::Run { piece, input } => {
            let input: Value = parse_json("--input", input)?;
            let result = open(cli)?.run_piece(piece, &input)?;
            let human = match (&result.status, &result.output) {
                (ExecStatus::Ok, Some(out)) => out.to_string(),
                (status, _) => format!("{status:?}\n{}", String::from_utf8_lossy(&result.stderr_raw)),
            };
            let failed = result.status != ExecStatus::Ok;
            Ok(Outcome::domain(to_value(&result), human, failed))
        }
        Command::Graph(cmd) => graph(cli, cmd),
        Command::Integrate { graph } => {
            let report = open(cli)?.integrate(graph)?;
            let mut human = String::new();
            for r in &report.results {
                human.push_str(&format!("{} {}\n", if r.passed { "pass" } else { "FAIL" }, r.test_id));
                for (name, m) in r.outputs.iter().filter(|(_, m)| !m.matched) {
                    human.push_str(&format!("    {name}: {}\n", m.detail));
                }
            }
            human.push_str(&format!("{}/{} passed", report.results.iter().filter(|r| r.passed).count(), report.results.len()));
            Ok(Outcome::domain(to_value(&report), human, !report.passed()))
        }
        Command::Localize { graph, test, reference } => {
            let loc = open(cli)?.localize(graph, test, reference.as_deref())?;
            let suspect = loc.report.as_ref().and_then(|r| r.suspect_node.clone());
            let human = match (&loc.report, &suspect) {
                _ if loc.test_passed => format!("{test} passes; nothing to localize"),
                (Some(r), Some(node)) => {
                    let mut s = format!("suspect: {node} ({})\nverified upstream: {}", r.method, r.upstream_verified.join(", "));
                    if let Some(summary) = &r.summary {
                        s.push_str(&format!("\n{summary}"));
                    }
                    s
                }
                _ => format!("{test} fails but no node diverges"),
            };
            Ok(Outcome::domain(to_value(&loc), human, suspect.is_some()))
        }
        Command::History { piece } => {
            let filter = piece.as_deref().map(HistoryFilter::piece).unwrap_or_default();
            let events = open(cli)?.history(&filter)?;
            let human = events
                .iter()
                .map(|e| format!("{:>5} {} {:<16} {:<20} {}", e.seq, e.timestamp.to_rfc3339(), e.actor.to_string(), e.action, e.refs.join(" ")))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Outcome::ok(to_value(&events), human))
        }
        Command::Serve { port, static_dir } => serve(cli, *port, static_dir.clone()),
    }
}

fn init(cli: &Cli, config: Option<&Path>) -> CmdResult {
    let root = match &cli.project {
        Some(p) => p.clone(),
        None => std::env::current_dir().map_err(|e| Failure::environment(e.to_string()))?,
    };
    let config: ProjectConfig = match config {
        Some(path) => read_json(path)?,
        None => ProjectConfig::default(),
    };
    let project = Project::init(&root, &config).map_err(|e| match e {
        StoreError::NotEmpty(_) => Failure::usage(e.to_string()),
        other => other.into(),
    })?;
    let root = project.root().display().to_string();
    Ok(Outcome::ok(json!({ "project": root }), format!("initialized {root}")))
}

fn code_gen(cli: &Cli, args: &CodeGen) -> CmdResult {
    let svc = open(cli)?;
    let opts = SynthesisOptions { max_iterations: args.budget, candidates: args.candidates, ..Default::default() };
    let start = svc.history(&HistoryFilter::default())?.last().map_or(0, |e| e.seq);
    let worker = {
        let svc = Arc::clone(&svc);
        let piece = args.piece.clone();
        std::thread::spawn(move || svc.synthesize(&piece, &opts))
    };
    // progress from the audit stream while the run proceeds
    let mut seen = start;
    let mut report_progress = |svc: &Service, wait: Duration| {
        for e in svc.events(seen, wait).unwrap_or_default() {
            seen = e.seq;
            if e.action == actions::CANDIDATE_PRODUCED {
                if let Ok(p) = svc.payload(&e.payload_digest) {
                    let verdict = if p["passed"] == json!(true) { "passes" } else { "fails" };
                    eprintln!("iteration {}: {} {verdict}", p["index"], p["candidate_id"].as_str().unwrap_or("?"));
                }
            }
        }
    };
    while !worker.is_finished() {
        report_progress(&svc, Duration::from_millis(200));
    }
    report_progress(&svc, Duration::ZERO);
    let result = worker.join().map_err(|_| Failure::environment("synthesis thread panicked"))??;

    let out = &result.outcome;
    let n = out.iterations.len();
    let human = match (out.status, &out.winner) {
        (LoopStatus::Success, Some(w)) => format!("success after {n} iterations; selected {}", w.candidate_id),
        _ => out.detail.clone().unwrap_or_else(|| out.status.as_str().to_string()),
    };
    let doc = to_value(&result);
    match out.status {
        LoopStatus::Success => Ok(Outcome::ok(doc, human)),
        LoopStatus::Exhausted | LoopStatus::Stagnated => Ok(Outcome::domain(doc, human, true)),
        LoopStatus::BackendError => Err(Failure { exit: 3, code: "backend", detail: human }),
    }
}

fn graph(cli: &Cli, cmd: &GraphCmd) -> CmdResult {
    match cmd {
        GraphCmd::Check { graph } => {
            let check = open(cli)?.check_graph(graph)?;
            let human = if check.ok {
                format!("{graph}: ok")
            } else {
                check.violations.join("\n")
            };
            Ok(Outcome::domain(to_value(&check), human, !check.ok))
        }
        GraphCmd::Run { graph, inputs } => {
            let inputs: Map<String, Value> = match inputs {
                Some(text) => parse_json("--inputs", text)?,
                None => Map::new(),
            };
            let run = open(cli)?.run_graph(graph, &inputs)?;
            let human = match &run.outputs {
                Some(outputs) => Value::Object(outputs.clone()).to_string(),
                None => {
                    let last = run.trace.per_node.last().map(|n| n.node_id.as_str()).unwrap_or("-");
                    format!("run {} failed at {last}", run.run_id)
                }
            };
            let failed = run.outputs.is_none();
            Ok(Outcome::domain(to_value(&run), human, failed))
        }
        GraphCmd::Add { file } => {
            let g: CompositionGraph = read_json(file)?;
            open(cli)?.put_graph(&g)?;
            Ok(Outcome::ok(json!({ "graph_id": g.graph_id }), format!("{} stored", g.graph_id)))
        }
        GraphCmd::Tests { graph, file } => {
            let tests: Vec<IntegrationTest> = read_json(file)?;
            open(cli)?.put_integration_tests(graph, &tests)?;
            let human = format!("{graph}: {} integration tests stored", tests.len());
            Ok(Outcome::ok(json!({ "graph_id": graph, "tests": tests.len() }), human))
        }
    }
}

fn serve(cli: &Cli, port: u16, static_dir: Option<PathBuf>) -> CmdResult {
    let svc = open(cli)?;
    let token = std::env::var("PIECEFORGE_TOKEN").ok().filter(|t| !t.is_empty()).unwrap_or_else(pieceforge_server::generate_token);
    let mut config = pieceforge_server::ServerConfig::new(token.clone());
    config.static_dir = static_dir;
    let json_mode = cli.json;
    pieceforge_server::serve_blocking(([127, 0, 0, 1], port).into(), svc, config, |addr| {
        let url = format!("http://{addr}/");
        let mut stdout = std::io::stdout().lock();
        if json_mode {
            let _ = writeln!(stdout, "{}", to_canonical(&json!({"url": url, "token": token})).expect("canonical output"));
        } else {
            let _ = writeln!(stdout, "serving {url}\ntoken {token}");
        }
        let _ = stdout.flush();
    })
    .map_err(|e| Failure::environment(format!("serve: {e}")))?;
    Ok(Outcome::ok(Value::Null, ""))
}
