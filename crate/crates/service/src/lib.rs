//! HTTP front end of a loaded model package.
//!
//! `GET /model/metadata`, `POST /predict`, `GET /health`. Handlers are
//! stateless; the package is shared read-only.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedtwin::twin::{ModelPackage, ScenarioRequest, Twin, TwinError};
use serde_json::{json, Value};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot read package {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Package(#[from] TwinError),
    #[error("invalid CORS origin {0:?}")]
    Origin(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

/// A JSON error body `{error, message, field?}` with its status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad_request(kind: &'static str, message: String, field: Option<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind,
            message,
            field,
        }
    }
}

impl From<TwinError> for ApiError {
    fn from(e: TwinError) -> Self {
        let message = e.to_string();
        match e {
            TwinError::UnknownOverride(name) => Self::bad_request("unknown_override", message, Some(name)),
            TwinError::BadOverride { name, .. } => Self::bad_request("invalid_override", message, Some(name)),
            TwinError::Input(_) => Self::bad_request("invalid_input", message, None),
            TwinError::Export(_) | TwinError::Package(_) => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                kind: "internal",
                message,
                field: None,
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request("invalid_json", e.body_text(), None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.kind, "message": self.message});
        if let Some(field) = self.field {
            body["field"] = Value::String(field);
        }
        (self.status, Json(body)).into_response()
    }
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn metadata(State(twin): State<Arc<Twin>>) -> Json<Value> {
    Json(json!(twin.package().metadata()))
}

async fn predict(
    State(twin): State<Arc<Twin>>,
    body: Result<Json<Value>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) = body?;
    let req = ScenarioRequest::from_json(&body)?;
    let report = twin.predict(&req)?;
    Ok(Json(json!(report)))
}

/// Routes with CORS; `origin` restricts it to one origin, otherwise any.
pub fn router(twin: Arc<Twin>, origin: Option<&str>) -> Result<Router, ServiceError> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServiceError::Origin(o.into()))?),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/health", get(health))
        .route("/model/metadata", get(metadata))
        .route("/predict", post(predict))
        .layer(cors)
        .with_state(twin))
}

pub fn load_package(path: &Path) -> Result<Twin, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(|source| ServiceError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Twin::new(ModelPackage::from_json(&text)?)?)
}

/// Binds and serves until ctrl-c.
pub async fn serve(twin: Twin, addr: SocketAddr, origin: Option<&str>) -> Result<(), ServiceError> {
    let app = router(Arc::new(twin), origin)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
}
