use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::session::{Session, SubmitError, Submission};

type Shared = Arc<Session>;

fn error(status: StatusCode, reason: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": reason.to_string() }))).into_response()
}

/// API routes; with `assets`, other paths are served from that directory.
pub fn router(session: Shared, assets: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/unit/{*rest}", get(unit))
        .route("/api/labels", post(labels))
        .route("/api/metrics", get(metrics))
        .route("/api/status", get(status))
        .with_state(session);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `router` on `addr` until the process ends.
pub async fn serve(session: Shared, addr: SocketAddr, assets: Option<&Path>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session, assets)).await
}

async fn queue(State(s): State<Shared>) -> Response {
    match s.queue() {
        Ok(items) => Json(items).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// `/api/unit/{id}/image` or `/api/unit/{id}/mask`; ids may contain `/`.
async fn unit(State(s): State<Shared>, UrlPath(rest): UrlPath<String>) -> Response {
    let (id, what) = match rest.rsplit_once('/') {
        Some((id, what @ ("image" | "mask"))) => (id, what),
        _ => return error(StatusCode::NOT_FOUND, format!("no resource {rest}")),
    };
    let Some(u) = s.unit(id) else {
        return error(StatusCode::NOT_FOUND, format!("unit {id} is not in the current round"));
    };
    let out = if what == "image" {
        s.crop_png(&u).map(|png| ([(header::CONTENT_TYPE, "image/png")], png).into_response())
    } else {
        s.mask(&u).map(|m| Json(m).into_response())
    };
    out.unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e))
}

async fn labels(State(s): State<Shared>, body: axum::body::Bytes) -> Response {
    let sub: Submission = match serde_json::from_slice(&body) {
        Ok(sub) => sub,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed submission: {e}")),
    };
    match s.submit(sub) {
        Ok(receipt) => Json(receipt).into_response(),
        Err(e) => {
            let code = match e {
                SubmitError::UnknownUnit(_) => StatusCode::NOT_FOUND,
                SubmitError::AlreadyDecided(_) => StatusCode::CONFLICT,
                SubmitError::Invalid(_) => StatusCode::BAD_REQUEST,
                SubmitError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            };
            error(code, e)
        }
    }
}

async fn metrics(State(s): State<Shared>) -> Response {
    Json(s.history()).into_response()
}

async fn status(State(s): State<Shared>) -> Response {
    Json(s.status()).into_response()
}
