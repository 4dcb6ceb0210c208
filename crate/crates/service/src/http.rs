//! HTTP routes.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use mac_core::api::{
    AcceptRequest, AcceptResponse, CompleteRequest, CompleteResponse, ErrorBody, RateRequest, RateResponse,
    SessionResponse, StudyReport,
};

use crate::error::ServiceError;
use crate::service::Service;

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::Closed | ServiceError::NoSuggestion | ServiceError::EmptyDraft => StatusCode::CONFLICT,
            ServiceError::AcceptBounds { .. } | ServiceError::RatingBounds(_) => StatusCode::BAD_REQUEST,
            ServiceError::EmptyPool => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

type Shared = State<Arc<Service>>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/session", post(start_session))
        .route("/complete", post(complete))
        .route("/accept", post(accept))
        .route("/rate", post(rate))
        .route("/report", get(report))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

async fn start_session(State(s): Shared) -> Result<Json<SessionResponse>, ServiceError> {
    s.start_session().map(Json)
}

async fn complete(State(s): Shared, Json(req): Json<CompleteRequest>) -> Result<Json<CompleteResponse>, ServiceError> {
    s.complete(req).await.map(Json)
}

async fn accept(State(s): Shared, Json(req): Json<AcceptRequest>) -> Result<Json<AcceptResponse>, ServiceError> {
    s.accept(req).await.map(Json)
}

async fn rate(State(s): Shared, Json(req): Json<RateRequest>) -> Result<Json<RateResponse>, ServiceError> {
    s.rate(req).await.map(Json)
}

async fn report(State(s): Shared) -> Json<StudyReport> {
    Json(s.report().await)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    service: Arc<Service>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
