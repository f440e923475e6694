//! HTTP front end for the review workflow.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use forumint_core::eval::EvalError;
use forumint_core::review::{ReviewError, ReviewService, TaskQuery, TaskStatus};

pub const CODER_HEADER: &str = "x-coder-id";

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<ReviewService>,
    pub static_dir: Option<PathBuf>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/tasks", get(tasks))
        .route("/api/annotations", post(annotations))
        .route("/api/conflicts", get(conflicts))
        .route("/api/adjudications", post(adjudications))
        .route("/api/report", get(report))
        .route("/api/progress", get(progress))
        .fallback(static_asset)
        .with_state(state)
}

struct ApiError(ReviewError);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.0.to_string();
        let (status, body) = match self.0 {
            ReviewError::Unauthenticated => (StatusCode::UNAUTHORIZED, json!({ "error": message })),
            ReviewError::UnknownCoder(_) => (StatusCode::BAD_REQUEST, json!({ "error": message })),
            ReviewError::CoderMismatch { .. } => (StatusCode::FORBIDDEN, json!({ "error": message })),
            ReviewError::UnknownUnit(_) => (StatusCode::NOT_FOUND, json!({ "error": message })),
            ReviewError::Invalid(errors) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": message, "fields": errors }),
            ),
            ReviewError::Unresolved(cells) => (
                StatusCode::CONFLICT,
                json!({ "error": message, "unresolved": cells }),
            ),
            ReviewError::Eval(e @ EvalError::EmptyInput) => {
                (StatusCode::CONFLICT, json!({ "error": e.to_string() }))
            }
            ReviewError::Eval(e) => (StatusCode::CONFLICT, json!({ "error": e.to_string() })),
            ReviewError::Store(e) => {
                tracing::error!(error = %e, "store failure");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() }))
            }
        };
        (status, Json(body)).into_response()
    }
}

fn caller(state: &AppState, headers: &HeaderMap) -> Result<String, ApiError> {
    let raw = headers.get(CODER_HEADER).and_then(|v| v.to_str().ok());
    Ok(state.service.check_coder(raw)?)
}

/// Runs store-touching work off the async executor.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    F: FnOnce(&ReviewService) -> Result<T, ReviewError> + Send + 'static,
    T: Send + 'static,
{
    let service = state.service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .expect("review task panicked")
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
struct TasksParams {
    coder: Option<String>,
    status: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn tasks(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(params): Query<TasksParams>,
) -> Result<Response, ApiError> {
    let who = caller(&state, &headers)?;
    let status = match params.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some("pending") => Some(TaskStatus::Pending),
        Some("done") => Some(TaskStatus::Done),
        Some(other) => {
            return Err(ApiError(ReviewError::Invalid(vec![
                forumint_core::eval::FieldError {
                    field: "status".into(),
                    reason: format!("expected pending, done or all, got {other:?}"),
                },
            ])))
        }
    };
    let query = TaskQuery {
        coder: params.coder,
        status,
        page: params.page,
        page_size: params.page_size,
    };
    let page = blocking(&state, move |s| s.tasks(&who, &query)).await?;
    Ok(Json(page).into_response())
}

fn parse_body(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError(ReviewError::Invalid(vec![forumint_core::eval::FieldError {
            field: "body".into(),
            reason: e.to_string(),
        }]))
    })
}

async fn annotations(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let who = caller(&state, &headers)?;
    let body = parse_body(&body)?;
    let record = blocking(&state, move |s| s.submit(&who, &body)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn conflicts(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    caller(&state, &headers)?;
    let list = blocking(&state, |s| s.conflicts()).await?;
    Ok(Json(list).into_response())
}

async fn adjudications(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    caller(&state, &headers)?;
    let body = parse_body(&body)?;
    let record = blocking(&state, move |s| s.adjudicate(&body)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn report(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    caller(&state, &headers)?;
    let report = blocking(&state, |s| s.report()).await?;
    Ok(Json(report).into_response())
}

async fn progress(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ApiError> {
    caller(&state, &headers)?;
    let progress = blocking(&state, |s| Ok(s.progress())).await?;
    let body: Value = progress
        .into_iter()
        .map(|(coder, (done, total))| (coder, json!({ "done": done, "total": total })))
        .collect::<serde_json::Map<_, _>>()
        .into();
    Ok(Json(body).into_response())
}

const FALLBACK_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>forumint review</title></head>\n<body><h1>forumint review API</h1>\n<p>Endpoints: <code>/api/tasks</code>, <code>/api/annotations</code>, <code>/api/conflicts</code>, <code>/api/adjudications</code>, <code>/api/report</code>. Send <code>X-Coder-Id</code> with every request.</p>\n</body></html>\n";

/// Maps a request path onto a file under `root`, refusing anything that
/// would escape it.
fn resolve_asset(root: &Path, uri_path: &str) -> Option<PathBuf> {
    let rel = uri_path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn static_asset(State(state): State<AppState>, uri: Uri) -> Response {
    if uri.path().starts_with("/api/") {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": "no such endpoint" }))).into_response();
    }
    let Some(root) = &state.static_dir else {
        return if uri.path() == "/" {
            Html(FALLBACK_PAGE).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let Some(path) = resolve_asset(root, uri.path()) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub async fn serve(state: AppState, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "review API listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asset_paths_cannot_escape_root() {
        let root = Path::new("/srv/ui");
        assert_eq!(resolve_asset(root, "/"), Some(root.join("index.html")));
        assert_eq!(resolve_asset(root, "/app.js"), Some(root.join("app.js")));
        assert_eq!(resolve_asset(root, "/../etc/passwd"), None);
        assert_eq!(resolve_asset(root, "/a/../../b"), None);
    }
}
