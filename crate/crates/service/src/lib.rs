//! HTTP/JSON API over workloads, cost models and plan explanations.
//!
//! | Route | Result |
//! |---|---|
//! | `GET /api/workloads` | workload summaries |
//! | `GET /api/workloads/{wid}/plans` | plan summaries |
//! | `GET /api/plans/{pid}` | plan document |
//! | `GET /api/models` | models with training metadata |
//! | `GET /api/algorithms` | explainer names |
//! | `POST /api/models/{mid}/predict` | prediction and Q-error |
//! | `POST /api/models/{mid}/explain` | explanation and report |

mod cache;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use planlens_core::explain::Algorithm;
use planlens_core::metrics::q_error;
use planlens_core::model::{Hyperparams, TrainingMetadata};
use planlens_core::settings::{analyze, ExplainSettings};
use planlens_core::workload::OracleCostParams;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use cache::{CacheStatus, ExplanationCache};
pub use state::{load_models, load_workloads, AppState, LoadError, DEFAULT_CACHE_SIZE};

/// Response header telling whether an explanation came from the cache.
pub const CACHE_HEADER: &str = "x-explanation-cache";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub workload_dir: PathBuf,
    pub model_dir: PathBuf,
    pub cache_size: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Server(std::io::Error),
}

/// Loads state from disk and serves until the process is stopped.
pub async fn serve(
    config: ServiceConfig,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServeError> {
    let state = AppState::load(&config.workload_dir, &config.model_dir, config.cache_size)?;
    let listener = tokio::net::TcpListener::bind(config.listen)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.listen,
            source,
        })?;
    let addr = listener.local_addr().map_err(ServeError::Server)?;
    on_ready(addr);
    axum::serve(listener, router(Arc::new(state)))
        .await
        .map_err(ServeError::Server)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/workloads", get(list_workloads))
        .route("/api/workloads/{wid}/plans", get(list_plans))
        .route("/api/plans/{pid}", get(get_plan))
        .route("/api/models", get(list_models))
        .route("/api/algorithms", get(list_algorithms))
        .route("/api/models/{mid}/predict", post(predict))
        .route("/api/models/{mid}/explain", post(explain))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "message": message.into() }),
        }
    }

    fn not_found(code: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, format!("no such id: {id}"))
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn json_bytes(value: &impl Serialize) -> Bytes {
    Bytes::from(serde_json::to_vec(value).expect("response serializes"))
}

fn json_response(body: Bytes) -> Response {
    (
        [(
            header::CONTENT_TYPE,
            HeaderValue::from_static("application/json"),
        )],
        body,
    )
        .into_response()
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))
}

#[derive(Serialize)]
struct WorkloadSummary<'a> {
    workload_id: &'a str,
    plan_count: usize,
    params: &'a OracleCostParams,
}

async fn list_workloads(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<WorkloadSummary> = state
        .workloads()
        .map(|w| WorkloadSummary {
            workload_id: &w.workload_id,
            plan_count: w.plans.len(),
            params: &w.params,
        })
        .collect();
    json_response(json_bytes(&list))
}

#[derive(Serialize)]
struct PlanSummary<'a> {
    plan_id: &'a str,
    operator_count: usize,
    total_runtime_ms: f64,
}

async fn list_plans(
    State(state): State<Arc<AppState>>,
    Path(wid): Path<String>,
) -> Result<Response, ApiError> {
    let w = state
        .workload(&wid)
        .ok_or_else(|| ApiError::not_found("workload_not_found", &wid))?;
    let list: Vec<PlanSummary> = w
        .plans
        .iter()
        .map(|p| PlanSummary {
            plan_id: p.plan_id(),
            operator_count: p.operator_count(),
            total_runtime_ms: p.actual_total_runtime_ms(),
        })
        .collect();
    Ok(json_response(json_bytes(&list)))
}

async fn get_plan(
    State(state): State<Arc<AppState>>,
    Path(pid): Path<String>,
) -> Result<Response, ApiError> {
    let plan = state
        .plan_graph(&pid)
        .ok_or_else(|| ApiError::not_found("plan_not_found", &pid))?;
    Ok(json_response(Bytes::from(plan.to_json())))
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    model_id: &'a str,
    hyperparams: &'a Hyperparams,
    parameter_count: usize,
    training: Option<&'a TrainingMetadata>,
}

async fn list_models(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<ModelSummary> = state
        .models()
        .map(|(id, m)| ModelSummary {
            model_id: id,
            hyperparams: m.hyperparams(),
            parameter_count: m.parameter_count(),
            training: m.training(),
        })
        .collect();
    json_response(json_bytes(&list))
}

async fn list_algorithms() -> Response {
    json_response(json_bytes(&Algorithm::names()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    plan_id: String,
}

#[derive(Serialize)]
struct PredictResponse<'a> {
    model_id: &'a str,
    plan_id: &'a str,
    predicted_ms: f64,
    actual_ms: f64,
    q_error: f64,
}

async fn predict(
    State(state): State<Arc<AppState>>,
    Path(mid): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: PredictRequest = parse_body(&body)?;
    let model = state
        .model(&mid)
        .ok_or_else(|| ApiError::not_found("model_not_found", &mid))?;
    let plan = state
        .plan_graph(&req.plan_id)
        .ok_or_else(|| ApiError::not_found("plan_not_found", &req.plan_id))?;
    let unprocessable =
        |e: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "prediction_failed", e);
    let trace = model
        .predict(plan, None)
        .map_err(|e| unprocessable(e.to_string()))?;
    let actual = plan.actual_total_runtime_ms();
    let q =
        q_error(trace.predicted_runtime_ms, actual).map_err(|e| unprocessable(e.to_string()))?;
    Ok(json_response(json_bytes(&PredictResponse {
        model_id: &mid,
        plan_id: plan.plan_id(),
        predicted_ms: trace.predicted_runtime_ms,
        actual_ms: actual,
        q_error: q,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainRequest {
    plan_id: String,
    algorithm: String,
    #[serde(default)]
    config: Option<Value>,
}

async fn explain(
    State(state): State<Arc<AppState>>,
    Path(mid): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: ExplainRequest = parse_body(&body)?;
    let algorithm: Algorithm =
        req.algorithm
            .parse()
            .map_err(|e: planlens_core::explain::UnknownAlgorithm| {
                ApiError::new(StatusCode::BAD_REQUEST, "unknown_algorithm", e.to_string())
                    .with("valid_algorithms", json!(Algorithm::names()))
            })?;
    let model = state
        .model(&mid)
        .ok_or_else(|| ApiError::not_found("model_not_found", &mid))?;
    let (workload, index) = state
        .plan(&req.plan_id)
        .ok_or_else(|| ApiError::not_found("plan_not_found", &req.plan_id))?;
    let invalid = |e: String| ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e);
    let settings = match req.config {
        None | Some(Value::Null) => ExplainSettings::default(),
        Some(v) => ExplainSettings::from_json(v).map_err(|e| invalid(e.to_string()))?,
    };
    let resolved = settings
        .resolve(&req.plan_id, algorithm)
        .map_err(|e| invalid(e.to_string()))?;
    let key = format!(
        "{mid}\u{0}{}\u{0}{algorithm}\u{0}{}",
        req.plan_id,
        resolved.relevant_to(algorithm)
    );

    let (bytes, status) = state
        .cache
        .get_or_compute(&key, || async move {
            tokio::task::spawn_blocking(move || {
                let plan = &workload.plans[index];
                analyze(model.as_ref(), plan, algorithm, &resolved)
                    .map(|a| json_bytes(&a))
                    .map_err(|e| {
                        let mut err = ApiError::new(
                            StatusCode::UNPROCESSABLE_ENTITY,
                            "explanation_failed",
                            e.to_string(),
                        )
                        .with("numerical", json!(e.is_numerical()));
                        if let Some(curve) = e.loss_curve() {
                            err = err.with("diagnostics", json!({ "loss_curve": curve }));
                        }
                        err
                    })
            })
            .await
            .map_err(|e| {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            })?
        })
        .await?;
    let mut response = json_response(bytes);
    response
        .headers_mut()
        .insert(CACHE_HEADER, HeaderValue::from_static(status.as_str()));
    Ok(response)
}
