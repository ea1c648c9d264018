//! HTTP front end for [`BenchmarkService`].
//!
//! | method | path | body / query | reply |
//! |---|---|---|---|
//! | GET | `/api/next` | `?annotator=ID` | task descriptor |
//! | POST | `/api/annotate` | submission | acknowledgement |
//! | POST | `/api/skip` | skip | `{"ok":true}` |
//! | GET | `/api/progress` | `?annotator=ID` | progress |
//! | GET | `/api/metrics` | `?subset=A` (optional) | EER, AUROC, accuracy |
//! | GET | `/api/export.csv` | | every verdict as CSV |
//! | GET | `/audio/{pair_id}/{a,b}` | | WAV bytes |
//!
//! Errors are `{"error": code, "message": text}` with a matching status.
//! Labels never leave the service: tasks carry opaque pair ids and audio is
//! addressed by pair id, not by file name.

use std::net::SocketAddr;
use std::sync::Arc;

use aat_core::human::{BenchmarkService, HumanError, Side, Submission};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

pub struct ApiError(HumanError);

impl From<HumanError> for ApiError {
    fn from(e: HumanError) -> Self {
        ApiError(e)
    }
}

/// Status and machine-readable code for each service error.
pub fn classify(e: &HumanError) -> (StatusCode, &'static str) {
    use HumanError::*;
    match e {
        InvalidScore(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_score"),
        InvalidElapsed(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_elapsed"),
        InvalidAnnotator(_) => (StatusCode::BAD_REQUEST, "invalid_annotator"),
        NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
        UnknownPair(_) => (StatusCode::NOT_FOUND, "unknown_pair"),
        UnknownSubset(_) => (StatusCode::NOT_FOUND, "unknown_subset"),
        DuplicateAnnotation { .. } => (StatusCode::CONFLICT, "duplicate_annotation"),
        SubsetExhausted(_) => (StatusCode::CONFLICT, "subset_exhausted"),
        DegenerateLabels { .. } => (StatusCode::CONFLICT, "not_enough_judgments"),
        NonFiniteScore => (StatusCode::UNPROCESSABLE_ENTITY, "non_finite_score"),
        InvalidSet(_) | CorruptStore { .. } | Io(_) | Json(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = classify(&self.0);
        (status, Json(json!({"error": code, "message": self.0.to_string()}))).into_response()
    }
}

type Svc = Arc<BenchmarkService>;

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: String,
}

#[derive(Deserialize)]
struct SubsetQuery {
    subset: Option<String>,
}

#[derive(Deserialize)]
struct Skip {
    pair_id: String,
    annotator_id: String,
    elapsed_s: f64,
}

// The record log syncs on every append, so mutations run off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, HumanError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(HumanError::Io(std::io::Error::other(e))))?
        .map_err(ApiError)
}

async fn next(State(svc): State<Svc>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ApiError> {
    let task = blocking(move || svc.next_task(&q.annotator)).await?;
    Ok(Json(task).into_response())
}

async fn annotate(State(svc): State<Svc>, Json(sub): Json<Submission>) -> Result<Response, ApiError> {
    let ack = blocking(move || svc.record_annotation(&sub)).await?;
    Ok(Json(ack).into_response())
}

async fn skip(State(svc): State<Svc>, Json(s): Json<Skip>) -> Result<Response, ApiError> {
    blocking(move || svc.record_skip(&s.pair_id, &s.annotator_id, s.elapsed_s)).await?;
    Ok(Json(json!({"ok": true})).into_response())
}

async fn progress(State(svc): State<Svc>, Query(q): Query<AnnotatorQuery>) -> Response {
    Json(svc.progress(&q.annotator)).into_response()
}

async fn metrics(State(svc): State<Svc>, Query(q): Query<SubsetQuery>) -> Result<Response, ApiError> {
    Ok(Json(svc.metrics(q.subset.as_deref())?).into_response())
}

async fn export(State(svc): State<Svc>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], svc.export_csv()).into_response()
}

async fn audio(State(svc): State<Svc>, Path((pair_id, side)): Path<(String, String)>) -> Result<Response, ApiError> {
    let side = match side.as_str() {
        "a" => Side::A,
        "b" => Side::B,
        _ => return Ok(StatusCode::NOT_FOUND.into_response()),
    };
    let path = svc.audio_path(&pair_id, side)?.to_path_buf();
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError(HumanError::Io(e)))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav"), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

pub fn router(svc: Svc) -> Router {
    Router::new()
        .route("/api/next", get(next))
        .route("/api/annotate", post(annotate))
        .route("/api/skip", post(skip))
        .route("/api/progress", get(progress))
        .route("/api/metrics", get(metrics))
        .route("/api/export.csv", get(export))
        .route("/audio/{pair_id}/{side}", get(audio))
        .with_state(svc)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, svc: Svc) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(svc)).await
}
