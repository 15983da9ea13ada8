//! HTTP routes over [`Coordinator`].

use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use super::api::*;
use super::{ApiError, Coordinator};

/// Longest accepted `wait_ms` on result reads.
pub const MAX_WAIT_MS: u64 = 60_000;

/// Largest accepted request body.
pub const BODY_LIMIT: usize = 64 << 20;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn principal(coord: &Coordinator, headers: &HeaderMap) -> Result<String, ApiError> {
    let token = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or(ApiError::Unauthenticated)?;
    coord.principal_for(token.trim()).ok_or(ApiError::Unauthenticated)
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    r.map(|Json(v)| v).map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::PayloadTooLarge { size: BODY_LIMIT + 1, cap: BODY_LIMIT }
        } else {
            ApiError::BadRequest(e.body_text())
        }
    })
}

fn parse_id<T: FromStr>(s: &str) -> Result<T, ApiError> {
    s.parse().map_err(|_| ApiError::BadRequest(format!("malformed identifier {s:?}")))
}

pub fn router(coord: Arc<Coordinator>) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(serde_json::json!({"ok": true})) }))
        .route("/api/functions", post(register_function))
        .route("/api/functions/{id}", get(get_function))
        .route("/api/endpoints", post(register_endpoint))
        .route("/api/endpoints/{id}", get(get_endpoint).delete(delete_endpoint))
        .route("/api/tasks", post(submit))
        .route("/api/batches", post(submit_batch))
        .route("/api/tasks/status", post(bulk_status))
        .route("/api/tasks/{id}", get(task_status))
        .route("/api/tasks/{id}/result", get(task_result))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(coord)
}

/// Binds `addr` and serves until the future is dropped.
pub async fn serve(coord: Arc<Coordinator>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(coord)).await
}

/// Binds the configured listen address.
pub async fn bind(coord: &Coordinator) -> std::io::Result<(tokio::net::TcpListener, SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(&coord.config().listen).await?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

async fn register_function(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    req: Result<Json<RegisterFunctionRequest>, JsonRejection>,
) -> ApiResult<RegisterFunctionResponse> {
    let p = principal(&c, &headers)?;
    Ok(Json(c.register_function(&p, body(req)?)?))
}

async fn get_function(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<fabric_core::FunctionRecord> {
    let p = principal(&c, &headers)?;
    Ok(Json(c.get_function(&p, parse_id(&id)?)?))
}

async fn register_endpoint(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    req: Result<Json<RegisterEndpointRequest>, JsonRejection>,
) -> ApiResult<RegisterEndpointResponse> {
    let p = principal(&c, &headers)?;
    Ok(Json(c.register_endpoint(&p, body(req)?)?))
}

async fn get_endpoint(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<EndpointView> {
    let p = principal(&c, &headers)?;
    Ok(Json(c.get_endpoint(&p, parse_id(&id)?)?))
}

async fn delete_endpoint(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<serde_json::Value> {
    let p = principal(&c, &headers)?;
    let aborted = c.delete_endpoint(&p, parse_id(&id)?)?;
    Ok(Json(serde_json::json!({ "aborted": aborted })))
}

async fn submit(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    req: Result<Json<SubmitRequest>, JsonRejection>,
) -> ApiResult<SubmitResponse> {
    let started = Instant::now();
    let p = principal(&c, &headers)?;
    Ok(Json(c.submit(&p, body(req)?, started)?))
}

async fn submit_batch(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    req: Result<Json<BatchRequest>, JsonRejection>,
) -> ApiResult<BatchResponse> {
    let started = Instant::now();
    let p = principal(&c, &headers)?;
    Ok(Json(c.submit_batch(&p, body(req)?, started)?))
}

async fn bulk_status(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    req: Result<Json<StatusRequest>, JsonRejection>,
) -> ApiResult<StatusResponse> {
    let p = principal(&c, &headers)?;
    Ok(Json(c.status_many(&p, &body(req)?)))
}

async fn task_status(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<TaskView> {
    let p = principal(&c, &headers)?;
    Ok(Json(c.status(&p, parse_id(&id)?)?))
}

#[derive(Debug, Deserialize)]
struct WaitQuery {
    #[serde(default)]
    wait_ms: u64,
}

async fn task_result(
    State(c): State<Arc<Coordinator>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> ApiResult<ResultResponse> {
    let p = principal(&c, &headers)?;
    let id = parse_id(&id)?;
    if q.wait_ms > 0 {
        // authorization is checked before waiting
        c.status(&p, id)?;
        c.wait_terminal(id, Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS))).await;
    }
    Ok(Json(c.result(&p, id)?))
}
