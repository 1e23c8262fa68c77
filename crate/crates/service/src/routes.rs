use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hahog::training::Verdict;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::state::AppState;

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/review/next", get(next_review))
        .route("/frames/{id}", get(raster))
        .route("/frames/{id}/meta", get(meta))
        .route("/frames/{id}/detections", get(detections))
        .route("/frames/{id}/verdict", post(verdict))
        .route("/store/stats", get(store_stats))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

/// Runs blocking work (file access, detection) off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health(State(s): Shared) -> Json<Value> {
    let (stats, total, reviewed) = s.stats();
    Json(json!({
        "status": "ok",
        "model_hash": s.model().hash,
        "frames": s.frames.len(),
        "reviewed": reviewed,
        "store": {"total": total, "counts": stats},
    }))
}

async fn next_review(State(s): Shared) -> Result<Json<Value>, ApiError> {
    let Some(id) = s.next_pending() else {
        return Ok(Json(json!({"status": "empty"})));
    };
    let st = s.clone();
    let lookup = id.clone();
    let (dets, hash) = blocking(move || st.detections(&lookup)).await?;
    Ok(Json(json!({
        "status": "pending",
        "frame_id": id,
        "raster": format!("/frames/{id}.pgm"),
        "model_hash": hash,
        "detections": *dets,
    })))
}

async fn raster(State(s): Shared, Path(file): Path<String>) -> Result<Response, ApiError> {
    let Some(id) = file.strip_suffix(".pgm") else {
        return Err(ApiError::unknown_frame(&file));
    };
    let path = s.frame_path(id)?.clone();
    let bytes = blocking(move || std::fs::read(&path).map_err(|e| ApiError::internal(e.to_string()))).await?;
    Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes).into_response())
}

async fn meta(State(s): Shared, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let st = s.clone();
    let lookup = id.clone();
    let (frame, calib) = blocking(move || st.load_frame(&lookup)).await?;
    Ok(Json(json!({
        "frame_id": id,
        "width": frame.width,
        "height": frame.height,
        "max_value": 65535,
        "invalid_value": hahog::depth::INVALID_DEPTH,
        "calibration": calib,
        "reviewed": s.is_reviewed(&id),
    })))
}

async fn detections(State(s): Shared, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let st = s.clone();
    let (dets, hash) = blocking(move || st.detections(&id)).await?;
    let mut v = serde_json::to_value(&*dets).map_err(|e| ApiError::internal(e.to_string()))?;
    v["model_hash"] = json!(hash);
    Ok(Json(v))
}

async fn verdict(State(s): Shared, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let v: Verdict = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("invalid verdict: {e}")))?;
    let st = s.clone();
    let fid = id.clone();
    let (summary, replayed) = blocking(move || st.submit(&fid, &v)).await?;
    Ok(Json(json!({
        "status": if replayed { "replayed" } else { "ingested" },
        "frame_id": id,
        "positives": summary.positives,
        "negatives": summary.negatives,
        "skipped": summary.skipped,
    })))
}

async fn store_stats(State(s): Shared) -> Result<Json<Value>, ApiError> {
    let st = s.clone();
    blocking(move || {
        let ledger = st.ledger.lock().expect("ledger lock");
        let (pos, neg) = ledger.store.recount()?;
        Ok(Json(json!({
            "total": ledger.store.len(),
            "counts": ledger.store.stats(),
            "files": {"positive": pos, "negative": neg},
            "reviewed": ledger.reviews.len(),
        })))
    })
    .await
}
