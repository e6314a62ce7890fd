//! HTTP/JSON front end. Every request runs on the blocking pool against the
//! shared read-only [`Service`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::Value;

use crate::service::{Service, ServiceError};

type Op = fn(&Service, &Value) -> Result<Value, ServiceError>;

async fn handle(service: Arc<Service>, body: Bytes, op: Op) -> Response {
    let result = tokio::task::spawn_blocking(move || {
        let value: Value =
            serde_json::from_slice(&body).map_err(|e| ServiceError::bad("$", format!("malformed JSON: {e}")))?;
        op(&service, &value)
    })
    .await;
    match result {
        Ok(Ok(v)) => (StatusCode::OK, Json(v)).into_response(),
        Ok(Err(e)) => {
            let status = match e {
                ServiceError::BadRequest { .. } => StatusCode::BAD_REQUEST,
                ServiceError::Domain(_) => StatusCode::UNPROCESSABLE_ENTITY,
            };
            log::debug!("request rejected with {status}: {e}");
            (status, Json(e.to_json())).into_response()
        }
        Err(e) => {
            log::error!("request worker failed: {e}");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(serde_json::json!({"error": "internal error"})),
            )
                .into_response()
        }
    }
}

macro_rules! endpoint {
    ($op:path) => {
        post(|State(s): State<Arc<Service>>, body: Bytes| handle(s, body, $op))
    };
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/synthesize", endpoint!(Service::synthesize))
        .route("/complete", endpoint!(Service::complete))
        .route("/suggest", endpoint!(Service::suggest))
        .route("/place", endpoint!(Service::place))
        .route("/detect", endpoint!(Service::detect))
        .route("/likelihoods", endpoint!(Service::likelihoods))
        .route(
            "/meta",
            get(|State(s): State<Arc<Service>>| async move { Json(s.meta()) }),
        )
        .with_state(service)
}

pub async fn serve(service: Service, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(service))).await
}
