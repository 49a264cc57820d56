//! HTTP front end for the tool API.
//!
//! Routes: `POST /v1/estimate`, `POST /v1/area`, `GET /v1/health`. The
//! calibration is loaded once before the listener starts and is never
//! mutated afterwards.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::toolapi::{handle_body, health_json, Endpoint, ErrorCode, ToolContext, ToolError};

static INCIDENTS: AtomicU64 = AtomicU64::new(0);

fn json_response(status: u16, body: String) -> Response {
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn dispatch(endpoint: Endpoint, ctx: ToolContext, body: Bytes) -> Response {
    let Ok(text) = String::from_utf8(body.to_vec()) else {
        let err = ToolError {
            code: ErrorCode::InvalidJson,
            message: "request body is not valid UTF-8".into(),
            field: None,
        };
        return json_response(err.status(), err.to_json());
    };
    match tokio::task::spawn_blocking(move || handle_body(endpoint, &text, &ctx)).await {
        Ok((status, body)) => json_response(status, body),
        Err(join_err) => {
            let id = format!("inc-{:08x}", INCIDENTS.fetch_add(1, Ordering::Relaxed));
            tracing::error!(incident = %id, error = %join_err, "request handler failed");
            let err = ToolError {
                code: ErrorCode::Internal,
                message: format!("internal error, incident {id}"),
                field: None,
            };
            json_response(err.status(), err.to_json())
        }
    }
}

async fn estimate(State(ctx): State<ToolContext>, body: Bytes) -> Response {
    dispatch(Endpoint::Estimate, ctx, body).await
}

async fn area(State(ctx): State<ToolContext>, body: Bytes) -> Response {
    dispatch(Endpoint::Area, ctx, body).await
}

async fn health(State(ctx): State<ToolContext>) -> Response {
    json_response(200, health_json(&ctx))
}

pub fn router(ctx: ToolContext) -> Router {
    Router::new()
        .route("/v1/estimate", post(estimate))
        .route("/v1/area", post(area))
        .route("/v1/health", get(health))
        .with_state(ctx)
}

/// Serves until interrupted.
pub async fn serve(addr: SocketAddr, ctx: ToolContext) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, l_ref = ctx.calibration.l_ref, "listening");
    axum::serve(listener, router(ctx))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
