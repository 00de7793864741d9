//! Network-facing scoring service.
//!
//! Exposes the in-process scoring API over HTTP:
//!
//! - `POST /v1/score` — body is a [`ScoreRequest`], response a [`ScoreResult`]
//! - `POST /v1/compare` — body is a [`CompareRequest`], response a [`CompareResult`]
//! - `GET /healthz` — liveness plus the serving model's checksum
//!
//! Invalid requests get a 400 with a field-level message; internal failures
//! get a 500 carrying only an opaque id while the details go to the server
//! log. The model is read-only at serve time, so requests are handled
//! concurrently and independently, and identical requests (seed included)
//! return identical bodies.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{self, CompareRequest, CompareResult, ScoreRequest, ScoreResult, ScoringError};
use crate::toymodel::ToyModel;

/// Errors from starting or running the service itself (not from requests).
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("failed to bind {bind}: {message}")]
    Bind { bind: String, message: String },
    #[error("server error: {message}")]
    Server { message: String },
}

/// Shared, read-only serving state: the model and its precomputed checksum.
#[derive(Clone)]
pub struct ServiceState {
    model: Arc<ToyModel>,
    checksum: Arc<str>,
}

impl ServiceState {
    pub fn new(model: ToyModel) -> Self {
        let checksum: Arc<str> = model.checksum().into();
        Self {
            model: Arc::new(model),
            checksum,
        }
    }
}

/// Body of `GET /healthz`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_checksum: String,
}

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// "validation" for rejected requests, "internal" for server faults.
    pub kind: String,
    /// The offending field, when the failure is attributable to one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    /// Human-readable description; omitted for internal faults.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Opaque correlation id for internal faults; grep the server log for it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

enum ApiError {
    BadRequest {
        field: Option<String>,
        message: String,
    },
    Internal {
        id: String,
    },
}

static ERROR_COUNTER: AtomicU64 = AtomicU64::new(0);

fn next_error_id() -> String {
    format!("err-{:06}", ERROR_COUNTER.fetch_add(1, Ordering::Relaxed) + 1)
}

fn internal(detail: impl std::fmt::Display) -> ApiError {
    let id = next_error_id();
    log::error!(target: "carm::service", "{id}: {detail}");
    ApiError::Internal { id }
}

impl From<ScoringError> for ApiError {
    fn from(err: ScoringError) -> Self {
        match err {
            ScoringError::Validation { field, message } => ApiError::BadRequest {
                field: Some(field.to_string()),
                message,
            },
            other => internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, detail) = match self {
            ApiError::BadRequest { field, message } => (
                StatusCode::BAD_REQUEST,
                ErrorDetail {
                    kind: "validation".to_string(),
                    field,
                    message: Some(message),
                    id: None,
                },
            ),
            ApiError::Internal { id } => (
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorDetail {
                    kind: "internal".to_string(),
                    field: None,
                    message: None,
                    id: Some(id),
                },
            ),
        };
        (status, Json(ErrorBody { error: detail })).into_response()
    }
}

fn reject_body(rejection: JsonRejection) -> ApiError {
    ApiError::BadRequest {
        field: None,
        message: rejection.body_text(),
    }
}

async fn score_handler(
    State(state): State<ServiceState>,
    payload: Result<Json<ScoreRequest>, JsonRejection>,
) -> Result<Json<ScoreResult>, ApiError> {
    let Json(req) = payload.map_err(reject_body)?;
    let model = state.model.clone();
    let result = tokio::task::spawn_blocking(move || scoring::score_scaled(&model, &req))
        .await
        .map_err(|join| internal(format!("scoring task failed: {join}")))??;
    Ok(Json(result))
}

async fn compare_handler(
    State(state): State<ServiceState>,
    payload: Result<Json<CompareRequest>, JsonRejection>,
) -> Result<Json<CompareResult>, ApiError> {
    let Json(req) = payload.map_err(reject_body)?;
    let model = state.model.clone();
    let result = tokio::task::spawn_blocking(move || scoring::compare(&model, &req))
        .await
        .map_err(|join| internal(format!("comparison task failed: {join}")))??;
    Ok(Json(result))
}

async fn healthz_handler(State(state): State<ServiceState>) -> Json<Health> {
    Json(Health {
        status: "ok".to_string(),
        model_checksum: state.checksum.to_string(),
    })
}

async fn log_requests(req: axum::extract::Request, next: Next) -> Response {
    let method = req.method().clone();
    let uri = req.uri().clone();
    let start = Instant::now();
    let response = next.run(req).await;
    log::info!(
        target: "carm::service",
        "{method} {uri} -> {} in {:.1}ms",
        response.status().as_u16(),
        start.elapsed().as_secs_f64() * 1e3,
    );
    response
}

/// Builds the full service router over the given state.
pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/v1/score", post(score_handler))
        .route("/v1/compare", post(compare_handler))
        .route("/healthz", get(healthz_handler))
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

/// A running service that can be shut down gracefully. Dropping the handle
/// aborts the server task without waiting for in-flight requests.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<Result<(), std::io::Error>>,
}

impl ServiceHandle {
    /// Signals shutdown and waits for the server to drain.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Binds `bind` (e.g. `127.0.0.1:0` for an ephemeral port) and starts
/// serving in a background task. Returns once the socket is bound, with the
/// actual local address in the handle.
pub async fn start(bind: &str, model: ToyModel) -> Result<ServiceHandle, ServiceError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| ServiceError::Bind {
            bind: bind.to_string(),
            message: e.to_string(),
        })?;
    let addr = listener.local_addr().map_err(|e| ServiceError::Bind {
        bind: bind.to_string(),
        message: e.to_string(),
    })?;
    let app = router(ServiceState::new(model));
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    log::info!(target: "carm::service", "listening on {addr}");
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        task,
    })
}

/// Serves until interrupted (ctrl-c); used by the command-line `serve`.
pub fn serve_blocking(bind: &str, model: ToyModel) -> Result<(), ServiceError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Server {
        message: format!("failed to start async runtime: {e}"),
    })?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| ServiceError::Bind {
                bind: bind.to_string(),
                message: e.to_string(),
            })?;
        let addr = listener.local_addr().map_err(|e| ServiceError::Bind {
            bind: bind.to_string(),
            message: e.to_string(),
        })?;
        log::info!(target: "carm::service", "listening on {addr}");
        axum::serve(listener, router(ServiceState::new(model)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!(target: "carm::service", "shutting down");
            })
            .await
            .map_err(|e| ServiceError::Server {
                message: e.to_string(),
            })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{ToyConfig, ToyParams, Vocab};

    fn test_model(seed: u64) -> ToyModel {
        let mut cfg = ToyConfig::toy_profile(seed);
        cfg.embed_dim = 4;
        let vocab = Vocab::build(["alpha beta gamma delta"]);
        cfg.vocab_size = vocab.len();
        let params = ToyParams::init(&cfg, seed);
        ToyModel::new(cfg, vocab, params).expect("valid test model")
    }

    #[test]
    fn error_ids_are_distinct() {
        let a = next_error_id();
        let b = next_error_id();
        assert_ne!(a, b);
        assert!(a.starts_with("err-"), "unexpected id shape {a}");
    }

    #[test]
    fn validation_error_bodies_carry_the_field_and_omit_internals() {
        let body = ErrorBody {
            error: ErrorDetail {
                kind: "validation".to_string(),
                field: Some("m".to_string()),
                message: Some("must be >= 1".to_string()),
                id: None,
            },
        };
        let json = serde_json::to_string(&body).expect("serializable");
        assert!(json.contains("\"field\":\"m\""), "body was {json}");
        assert!(!json.contains("\"id\""), "body was {json}");
    }

    #[tokio::test]
    async fn service_starts_answers_health_and_shuts_down() {
        let model = test_model(5);
        let checksum = model.checksum();
        let handle = start("127.0.0.1:0", model).await.expect("service starts");
        let url = format!("http://{}/healthz", handle.addr);
        let health: Health = reqwest::get(&url)
            .await
            .expect("health request succeeds")
            .json()
            .await
            .expect("health body parses");
        assert_eq!(health.status, "ok");
        assert_eq!(health.model_checksum, checksum);
        handle.shutdown().await;
        assert!(reqwest::get(&url).await.is_err(), "server kept serving after shutdown");
    }
}
