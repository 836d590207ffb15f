//! HTTP front end of the annotation store.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cyborg_core::annotate::{AnnotationStore, AnnotationSubmission, ExportedMask, NextPair, Prompt};
use serde::{Deserialize, Serialize};

pub struct AppState {
    pub store: Mutex<AnnotationStore>,
    /// Image id → file on disk.
    pub images: HashMap<String, PathBuf>,
    /// Built UI bundle, if any.
    pub static_dir: Option<PathBuf>,
}

impl AppState {
    /// Image paths in the pairs manifest are resolved against `base`.
    pub fn new(store: AnnotationStore, base: &Path, static_dir: Option<PathBuf>) -> Self {
        let images = store
            .pairs()
            .flat_map(|p| [&p.real, &p.fake])
            .filter_map(|img| img.path.as_ref().map(|path| (img.image_id.clone(), base.join(path))))
            .collect();
        AppState {
            store: Mutex::new(store),
            images,
            static_dir,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PairQuery {
    #[serde(default)]
    annotator: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PairResponse {
    pub pair_id: String,
    pub left_url: String,
    pub right_url: String,
    pub prompt: Prompt,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    correct_only: bool,
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(serde_json::json!({ "error": message.to_string() }))).into_response()
}

fn core_error(e: cyborg_core::Error) -> Response {
    if e.is_validation() {
        error(StatusCode::BAD_REQUEST, e)
    } else {
        log::error!("{e}");
        error(StatusCode::INTERNAL_SERVER_ERROR, e)
    }
}

fn image_url(id: &str) -> String {
    format!("/images/{id}")
}

async fn next_pair(State(state): State<Arc<AppState>>, Query(q): Query<PairQuery>) -> Response {
    let result = state.store.lock().expect("store lock").next_pair(&q.annotator);
    match result {
        Ok(NextPair::Pair(s)) => Json(PairResponse {
            left_url: image_url(&s.left_image_id),
            right_url: image_url(&s.right_image_id),
            pair_id: s.pair_id,
            prompt: s.prompt,
        })
        .into_response(),
        Ok(NextPair::Done) => Json(serde_json::json!({ "done": true })).into_response(),
        Err(e) => core_error(e),
    }
}

async fn submit(State(state): State<Arc<AppState>>, Json(mut sub): Json<AnnotationSubmission>) -> Response {
    if sub.timestamp == 0 {
        sub.timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
    }
    let result = state.store.lock().expect("store lock").submit(sub);
    match result {
        Ok(verdict) => Json(verdict).into_response(),
        Err(e) => core_error(e),
    }
}

async fn export(State(state): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> Response {
    let out = state.store.lock().expect("store lock").export_masks(q.correct_only);
    for ex in &out.exclusions {
        log::warn!("export skipped a record: {ex}");
    }
    let mut body = Vec::new();
    for m in &out.masks {
        if serde_json::to_writer(&mut body, &ExportedMask::from_mask(m)).is_err() {
            return error(StatusCode::INTERNAL_SERVER_ERROR, "serialization failed");
        }
        body.push(b'\n');
    }
    (
        [
            (header::CONTENT_TYPE, "application/x-ndjson".to_string()),
            (header::HeaderName::from_static("x-excluded-count"), out.exclusions.len().to_string()),
        ],
        body,
    )
        .into_response()
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    Json(state.store.lock().expect("store lock").stats()).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: &Path) -> Response {
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], Body::from(bytes)).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.images.get(&id) {
        Some(path) => send_file(path).await,
        None => error(StatusCode::NOT_FOUND, format!("unknown image {id:?}")),
    }
}

async fn static_file(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(root) = &state.static_dir else {
        return error(StatusCode::NOT_FOUND, "no UI bundle configured");
    };
    let rel = Path::new(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::BAD_REQUEST, "bad path");
    }
    let path = if rel.as_os_str().is_empty() {
        root.join("index.html")
    } else {
        root.join(rel)
    };
    send_file(&path).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/pair", get(next_pair))
        .route("/api/annotation", post(submit))
        .route("/api/export", get(export))
        .route("/api/stats", get(stats))
        .route("/images/{id}", get(image))
        .fallback(static_file)
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation server listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
