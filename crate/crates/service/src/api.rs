//! HTTP surface under `/api/v1`. Handlers call the same pipeline operations
//! as the CLI; long phases run as background jobs polled through
//! `GET /users/{id}/runs/{run_id}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ptm_core::evaluation::{EvalCondition, LikertPhase};
use ptm_core::graph::{GraphError, GraphNode, LayerTag};
use ptm_core::pipeline::{Phase, Pipeline, PipelineError, RunReport, RunStatus};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    /// Static bearer token; `None` leaves the API open.
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), detail: Value::Null }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::Precondition(_) => (StatusCode::CONFLICT, "precondition_failed"),
            PipelineError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            PipelineError::Invalid(_) | PipelineError::Graph(GraphError::InvalidNode { .. }) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            PipelineError::Llm(_) => (StatusCode::BAD_GATEWAY, "llm_error"),
            PipelineError::Embed(_) => (StatusCode::BAD_GATEWAY, "embedding_error"),
            PipelineError::Graph(_) | PipelineError::Consensus(_) | PipelineError::Io(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal_error")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking pipeline work off the async executor.
async fn blocking<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&Pipeline) -> Result<T, PipelineError> + Send + 'static,
) -> ApiResult<T> {
    let p = state.pipeline.clone();
    tokio::task::spawn_blocking(move || f(&p))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))?
        .map_err(ApiError::from)
}

/// Parses a JSON body; empty or malformed bodies are 400s in the envelope.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::bad_request("request body is empty"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    let users = Router::new()
        .route("/journals", post(post_journals))
        .route("/runs", post(post_run))
        .route("/runs/{run_id}", get(get_run))
        .route("/graph", get(get_graph))
        .route("/nodes/{node_id}", get(get_node))
        .route("/nodes/{node_id}/trace", get(get_trace))
        .route("/hitl/session", get(get_session))
        .route("/hitl/next", get(get_next))
        .route("/hitl/items/{item_id}/answer", post(post_answer))
        .route("/hitl/items/{item_id}/skip", post(post_skip))
        .route("/likert", post(post_likert))
        .route("/eval", post(post_eval))
        .route("/eval/report", get(get_report));
    let api = Router::new()
        .nest("/users/{user_id}", users)
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(health));
    Router::new().nest("/api/v1", api).fallback(not_found).with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"status": "ok", "mode": state.pipeline.config.llm.mode}))
}

async fn post_journals(State(state): State<Arc<AppState>>, Path(user): Path<String>, body: String) -> ApiResult<Response> {
    if body.trim().is_empty() {
        return Err(ApiError::bad_request("request body is empty; expected JSONL journal entries"));
    }
    let out = blocking(&state, move |p| p.ingest(&user, &body)).await?;
    Ok(Json(out).into_response())
}

/// Queues `phase` and runs it in the background.
async fn start_run(state: &Arc<AppState>, user: String, phase: Phase) -> ApiResult<Response> {
    let queued = blocking(state, move |p| p.queue_run(&user, phase)).await?;
    let p = state.pipeline.clone();
    let job = queued.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = p.run_phase_as(&job.user_id, job.phase, &job.run_id) {
            tracing::error!(run = %job.run_id, error = %e, "run aborted");
            let failed = RunReport { status: RunStatus::Failed, error: Some(e.to_string()), ..job };
            if let Err(e) = p.write_run(&failed) {
                tracing::error!(error = %e, "could not record failed run");
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(queued)).into_response())
}

#[derive(Deserialize)]
struct RunBody {
    phase: String,
}

async fn post_run(State(state): State<Arc<AppState>>, Path(user): Path<String>, body: Bytes) -> ApiResult<Response> {
    let b: RunBody = parse_body(&body)?;
    let phase: Phase = b.phase.parse().map_err(ApiError::bad_request)?;
    start_run(&state, user, phase).await
}

async fn get_run(State(state): State<Arc<AppState>>, Path((user, run_id)): Path<(String, String)>) -> ApiResult<Json<RunReport>> {
    Ok(Json(
        blocking(&state, move |p| {
            p.require_user(&user)?;
            p.load_run(&user, &run_id)
        })
        .await?,
    ))
}

#[derive(Deserialize)]
struct GraphQuery {
    layer: Option<String>,
    version: Option<u64>,
}

async fn get_graph(State(state): State<Arc<AppState>>, Path(user): Path<String>, Query(q): Query<GraphQuery>) -> ApiResult<Json<Value>> {
    let layer: Option<LayerTag> = q.layer.as_deref().map(str::parse).transpose().map_err(|e: String| ApiError::bad_request(e))?;
    let graph = blocking(&state, move |p| p.graph(&user, q.version)).await?;
    let v = match layer {
        None => serde_json::to_value(&graph),
        Some(l) => serde_json::to_value(graph.nodes().iter().filter(|n| n.layer() == l).collect::<Vec<&GraphNode>>()),
    };
    v.map(Json).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))
}

async fn get_node(State(state): State<Arc<AppState>>, Path((user, node_id)): Path<(String, String)>) -> ApiResult<Json<GraphNode>> {
    Ok(Json(
        blocking(&state, move |p| {
            let g = p.graph(&user, None)?;
            g.get(&node_id).cloned().ok_or_else(|| PipelineError::NotFound(format!("node {node_id}")))
        })
        .await?,
    ))
}

async fn get_trace(State(state): State<Arc<AppState>>, Path((user, node_id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let (node, evidence) = blocking(&state, move |p| {
        let g = p.graph(&user, None)?;
        let evidence = g.trace_to_evidence(&node_id)?;
        Ok((g.get(&node_id).cloned().expect("traced node exists"), evidence))
    })
    .await?;
    Ok(Json(json!({"node": node, "evidence": evidence})))
}

async fn load_session(state: &Arc<AppState>, user: String) -> ApiResult<ptm_core::hitl::HitlSession> {
    blocking(state, move |p| {
        p.require_user(&user)?;
        p.session(&user)?.ok_or_else(|| PipelineError::NotFound("no HITL session; run the hitl phase first".into()))
    })
    .await
}

async fn get_session(State(state): State<Arc<AppState>>, Path(user): Path<String>) -> ApiResult<Json<Value>> {
    let s = load_session(&state, user).await?;
    let report = s.report();
    Ok(Json(json!({"session": s, "report": report})))
}

async fn get_next(State(state): State<Arc<AppState>>, Path(user): Path<String>) -> ApiResult<Json<Value>> {
    let s = load_session(&state, user).await?;
    Ok(Json(json!({"item": s.next_pending(), "complete": s.is_complete()})))
}

#[derive(Deserialize)]
struct AnswerBody {
    answer: String,
}

async fn post_answer(
    State(state): State<Arc<AppState>>,
    Path((user, item)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let b: AnswerBody = parse_body(&body)?;
    if b.answer.trim().is_empty() {
        return Err(ApiError::bad_request("answer is empty"));
    }
    let out = blocking(&state, move |p| p.answer_item(&user, &item, &b.answer)).await?;
    Ok(Json(out).into_response())
}

async fn post_skip(State(state): State<Arc<AppState>>, Path((user, item)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let (item, version) = blocking(&state, move |p| p.skip_item(&user, &item)).await?;
    Ok(Json(json!({"item": item, "graph_version": version})))
}

#[derive(Deserialize)]
struct LikertBody {
    node_id: String,
    phase: LikertPhase,
    rating: i64,
}

async fn post_likert(State(state): State<Arc<AppState>>, Path(user): Path<String>, body: Bytes) -> ApiResult<Response> {
    let b: LikertBody = parse_body(&body)?;
    let (record, version) = blocking(&state, move |p| p.record_likert(&user, &b.node_id, b.phase, b.rating)).await?;
    Ok((StatusCode::CREATED, Json(json!({"record": record, "graph_version": version}))).into_response())
}

#[derive(Deserialize)]
struct EvalBody {
    condition: String,
}

fn condition(s: &str) -> ApiResult<EvalCondition> {
    s.parse().map_err(|e: String| ApiError::bad_request(e))
}

async fn post_eval(State(state): State<Arc<AppState>>, Path(user): Path<String>, body: Bytes) -> ApiResult<Response> {
    let b: EvalBody = parse_body(&body)?;
    let phase = match condition(&b.condition)? {
        EvalCondition::Pre => Phase::EvaluatePre,
        EvalCondition::Post => Phase::EvaluatePost,
    };
    start_run(&state, user, phase).await
}

#[derive(Deserialize)]
struct ReportQuery {
    condition: Option<String>,
}

async fn get_report(State(state): State<Arc<AppState>>, Path(user): Path<String>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let c = condition(q.condition.as_deref().ok_or_else(|| ApiError::bad_request("condition query parameter is required"))?)?;
    let report = blocking(&state, move |p| {
        p.require_user(&user)?;
        p.eval_report(&user, c)?.ok_or_else(|| PipelineError::NotFound(format!("no {c} evaluation report")))
    })
    .await?;
    Ok(Json(report).into_response())
}
