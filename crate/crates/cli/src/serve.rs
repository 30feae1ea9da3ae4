//! HTTP front for an agent.

use std::sync::Arc;

use axum::body::Bytes;
use axum::http::{Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use netsmo_core::{Agent, ApiRequest, ApiResponse, Document};

use crate::CliError;

async fn handle(agent: Arc<Agent>, method: Method, uri: Uri, body: Bytes) -> Response {
    let body: Document = if body.is_empty() {
        Document::Null
    } else {
        match serde_json::from_slice(&body) {
            Ok(b) => b,
            Err(e) => {
                return reply(ApiResponse::error(400, "BAD_REQUEST", format!("body is not JSON: {e}")));
            }
        }
    };
    let path = uri.path_and_query().map_or(uri.path(), |p| p.as_str()).to_string();
    let req = ApiRequest::new(method.as_str(), &path, body);
    match tokio::task::spawn_blocking(move || agent.dispatch(&req)).await {
        Ok(r) => reply(r),
        Err(e) => reply(ApiResponse::error(500, "INTERNAL", e.to_string())),
    }
}

fn reply(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(r.body)).into_response()
}

/// Serves until interrupted, then drains and writes the snapshot.
pub fn run(agent: Agent) -> Result<(), CliError> {
    let internal = |e: std::io::Error| CliError::Internal(e.to_string());
    let listener = agent
        .take_listener()
        .ok_or_else(|| CliError::Internal("agent has no socket".into()))?;
    listener.set_nonblocking(true).map_err(internal)?;
    let addr = listener.local_addr().map_err(internal)?;
    let agent = Arc::new(agent);
    let rt = tokio::runtime::Runtime::new().map_err(internal)?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        let a = agent.clone();
        let app = Router::new().fallback(move |m: Method, u: Uri, b: Bytes| handle(a.clone(), m, u, b));
        log::info!("listening on {addr}");
        eprintln!("netsmo agent listening on {addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    let stopped = agent.shutdown(true).map_err(|e| CliError::Internal(e.to_string()));
    served.map_err(internal)?;
    stopped
}
