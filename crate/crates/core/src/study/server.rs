//! HTTP API of the reader study.
//!
//! | method | path                      | body / query          |
//! |--------|---------------------------|-----------------------|
//! | GET    | `/api/study`              | study metadata        |
//! | GET    | `/api/study/next`         | `?rater=ID`           |
//! | GET    | `/img/{handle}`           | 8-bit PNG             |
//! | POST   | `/api/study/grades`       | [`GradeSubmission`]   |
//! | GET    | `/api/study/report`       | `?std=sample` optional|
//!
//! Rejections answer 400 with `{"error": "..."}`. Nothing sent before a
//! submission names a variant.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{GradeSubmission, StdKind, Study, ASPECTS};
use crate::error::Error;

pub type Shared = Arc<RwLock<Study>>;

fn error_response(e: &Error) -> Response {
    let status = match e {
        Error::Rejected(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(json!({ "error": e.to_string(), "category": e.category() }))).into_response()
}

fn read(state: &Shared) -> std::sync::RwLockReadGuard<'_, Study> {
    state.read().unwrap_or_else(|p| p.into_inner())
}

async fn metadata(State(state): State<Shared>) -> Response {
    let s = read(&state);
    Json(json!({
        "cases": s.case_count(),
        "images_per_case": 3,
        "aspects": ASPECTS,
        "grade_min": 1,
        "grade_max": 5,
        "best_grade": 1,
    }))
    .into_response()
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

async fn next(State(state): State<Shared>, Query(q): Query<RaterQuery>) -> Response {
    let Some(rater) = q.rater else {
        return error_response(&Error::Rejected("missing query parameter 'rater'".into()));
    };
    match read(&state).next_presentation(&rater) {
        Ok(n) => Json(n).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn image(State(state): State<Shared>, Path(handle): Path<String>) -> Response {
    let Some(path) = read(&state).image_path(&handle) else {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": "unknown image" }))).into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error_response(&Error::Io { path, source: e }),
    }
}

async fn grades(State(state): State<Shared>, body: Bytes) -> Response {
    let sub: GradeSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return error_response(&Error::Rejected(format!("malformed grade payload: {e}"))),
    };
    let mut s = state.write().unwrap_or_else(|p| p.into_inner());
    match s.submit(&sub) {
        Ok(records) => Json(json!({ "stored": records.len() })).into_response(),
        Err(e) => error_response(&e),
    }
}

#[derive(Deserialize)]
struct ReportQuery {
    std: Option<StdKind>,
}

async fn report(State(state): State<Shared>, Query(q): Query<ReportQuery>) -> Response {
    let r = read(&state).report(q.std.unwrap_or_default());
    let display: serde_json::Map<String, serde_json::Value> = r
        .cells
        .iter()
        .map(|(v, row)| {
            let row: serde_json::Map<String, serde_json::Value> =
                row.iter().map(|(a, c)| (a.clone(), c.display().into())).collect();
            (v.clone(), row.into())
        })
        .collect();
    Json(json!({ "report": r, "display": display })).into_response()
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/study", get(metadata))
        .route("/api/study/next", get(next))
        .route("/api/study/grades", post(grades))
        .route("/api/study/report", get(report))
        .route("/img/{handle}", get(image))
        .with_state(state)
}

/// Serves `study` on `addr` until the process ends.
pub async fn serve(study: Study, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(RwLock::new(study)))).await
}
