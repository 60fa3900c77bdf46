//! Local HTTP API over a project, for the web UI.
//!
//! Every endpoint forwards to one [`Service`] operation. Bodies are
//! canonical JSON; errors are `{"error": code, "detail": text}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use pieceforge_core::model::to_canonical;
use pieceforge_core::review::FeedbackItem;
use pieceforge_core::service::{Service, ServiceError, SynthesisOptions, DEFAULT_EXPERT};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::services::ServeDir;

/// Longest a poll request is held open.
pub const POLL_LIMIT: Duration = Duration::from_secs(25);
pub const EXPERT_HEADER: &str = "x-pieceforge-expert";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub token: String,
    pub poll_limit: Duration,
    /// Built web UI assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(token: impl Into<String>) -> Self {
        Self { token: token.into(), poll_limit: POLL_LIMIT, static_dir: None }
    }
}

pub fn generate_token() -> String {
    use rand::Rng;
    let bytes: [u8; 16] = rand::thread_rng().gen();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone)]
struct AppState {
    svc: Arc<Service>,
    config: Arc<ServerConfig>,
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(detail: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "invalid", detail: detail.into() }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Backend(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Environment(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, code: e.code(), detail: e.to_string() }
    }
}

fn json_response(status: StatusCode, body: &impl Serialize) -> Response {
    match to_canonical(body) {
        Ok(text) => (status, [(header::CONTENT_TYPE, "application/json")], text).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, format!("encoding error: {e}")).into_response(),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, &json!({ "error": self.code, "detail": self.detail }))
    }
}

type ApiResult = Result<Response, ApiError>;

/// Runs a blocking service call off the async executor.
async fn call<T: Serialize + Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult {
    let svc = Arc::clone(&state.svc);
    let value = tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "environment", detail: e.to_string() })??;
    Ok(json_response(StatusCode::OK, &value))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

fn parse_optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    let trimmed = body.trim_ascii();
    if trimmed.is_empty() || trimmed == b"null" {
        Ok(T::default())
    } else {
        parse_body(body)
    }
}

fn after_seq(query: &HashMap<String, String>) -> Result<Option<u64>, ApiError> {
    query
        .get("after_seq")
        .map(|s| s.parse().map_err(|_| ApiError::bad_request("after_seq must be a non-negative integer")))
        .transpose()
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let expected = format!("Bearer {}", state.config.token);
    let ok = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) == Some(expected.as_str());
    if ok {
        next.run(req).await
    } else {
        ApiError { status: StatusCode::UNAUTHORIZED, code: "unauthorized", detail: "missing or wrong bearer token".into() }
            .into_response()
    }
}

// ---------------------------------------------------------------- handlers

async fn list_pieces(State(s): State<AppState>) -> ApiResult {
    call(&s, |svc| svc.pieces()).await
}

async fn get_piece(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    call(&s, move |svc| svc.piece(&id)).await
}

async fn start_review(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    call(&s, move |svc| svc.start_review(&id)).await
}

async fn get_review(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    call(&s, move |svc| svc.review(&id)).await
}

fn expert(headers: &HeaderMap) -> String {
    headers
        .get(EXPERT_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.trim().is_empty())
        .unwrap_or(DEFAULT_EXPERT)
        .to_string()
}

async fn post_feedback(State(s): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let items: Vec<FeedbackItem> = parse_body(&body)?;
    let who = expert(&headers);
    call(&s, move |svc| svc.feedback(&id, items, &who)).await
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApproveBody {
    #[serde(default)]
    approver: Option<String>,
}

async fn approve(State(s): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: ApproveBody = parse_optional_body(&body)?;
    let who = b.approver.unwrap_or_else(|| expert(&headers));
    call(&s, move |svc| svc.approve(&id, &who)).await
}

async fn synthesize(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let opts: SynthesisOptions = parse_optional_body(&body)?;
    let svc = Arc::clone(&s.svc);
    let run_id = tokio::task::spawn_blocking(move || svc.start_synthesis(&id, &opts))
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "environment", detail: e.to_string() })??;
    Ok(json_response(StatusCode::OK, &json!({ "run_id": run_id })))
}

async fn run_status(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let after = after_seq(&q)?;
    let wait = s.config.poll_limit;
    call(&s, move |svc| svc.run_status(&id, after, wait)).await
}

async fn events(State(s): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let after = after_seq(&q)?;
    let wait = if after.is_some() { s.config.poll_limit } else { Duration::ZERO };
    call(&s, move |svc| svc.events(after.unwrap_or(0), wait)).await
}

async fn get_graph(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    call(&s, move |svc| svc.graph(&id)).await
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    #[serde(default)]
    inputs: Map<String, Value>,
}

async fn run_graph(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: RunBody = parse_optional_body(&body)?;
    call(&s, move |svc| svc.run_graph(&id, &b.inputs)).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalizeBody {
    test_id: String,
    #[serde(default)]
    reference_run: Option<String>,
}

async fn localize(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: LocalizeBody = parse_body(&body)?;
    call(&s, move |svc| svc.localize(&id, &b.test_id, b.reference_run.as_deref())).await
}

async fn no_ui() -> Response {
    (StatusCode::NOT_FOUND, "web UI not built; the JSON API is under /api/v1\n").into_response()
}

async fn unknown_endpoint() -> Response {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found", detail: "no such endpoint".into() }.into_response()
}

pub fn router(svc: Arc<Service>, config: ServerConfig) -> Router {
    let state = AppState { svc, config: Arc::new(config) };
    let api = Router::new()
        .route("/pieces", get(list_pieces))
        .route("/pieces/{id}", get(get_piece))
        .route("/pieces/{id}/review", get(get_review).post(start_review))
        .route("/pieces/{id}/review/feedback", post(post_feedback))
        .route("/pieces/{id}/review/approve", post(approve))
        .route("/pieces/{id}/synthesize", post(synthesize))
        .route("/runs/{id}", get(run_status))
        .route("/graphs/{id}", get(get_graph))
        .route("/graphs/{id}/run", post(run_graph))
        .route("/graphs/{id}/localize", post(localize))
        .route("/events", get(events))
        .fallback(unknown_endpoint)
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state.clone());
    let app = Router::new().nest("/api/v1", api);
    match &state.config.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(no_ui),
    }
}

/// Serves until the process ends. `on_ready` receives the bound address.
pub fn serve_blocking(
    addr: SocketAddr,
    svc: Arc<Service>,
    config: ServerConfig,
    on_ready: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_ready(listener.local_addr()?);
        axum::serve(listener, router(svc, config)).await
    })
}
