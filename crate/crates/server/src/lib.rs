//! HTTP boundary for live annotation. Request handling is concurrent;
//! every mutation goes through one mutex around the annotation service.

use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use alod_core::dataset::{ImageId, Violation};
use alod_core::service::{AnnotationService, PredictRequest, ServiceError, Submission};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::net::TcpListener;

#[derive(Clone)]
pub struct AppState {
    service: Arc<Mutex<AnnotationService>>,
    raster_root: Option<PathBuf>,
}

impl AppState {
    pub fn new(service: AnnotationService, raster_root: Option<PathBuf>) -> Self {
        Self {
            service: Arc::new(Mutex::new(service)),
            raster_root,
        }
    }

    /// The service behind the gate. A panic while holding the lock does
    /// not leave the state half-written, so poisoning is ignored.
    pub fn lock(&self) -> MutexGuard<'_, AnnotationService> {
        self.service.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<Violation>,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NoPendingBatch
            | ServiceError::NotInBatch(_)
            | ServiceError::DuplicateSubmission(_)
            | ServiceError::Finished(_) => StatusCode::CONFLICT,
            ServiceError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotSimulation => StatusCode::FORBIDDEN,
            ServiceError::Loop(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let violations = match &self.0 {
            ServiceError::Invalid { violations, .. } => violations.clone(),
            _ => Vec::new(),
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            violations,
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn queue(State(app): State<AppState>) -> ApiResult<impl Serialize> {
    Ok(Json(app.lock().queue()?))
}

async fn status(State(app): State<AppState>) -> Json<impl Serialize> {
    Json(app.lock().status())
}

async fn image(State(app): State<AppState>, Path(id): Path<u64>) -> ApiResult<impl Serialize> {
    Ok(Json(app.lock().image(ImageId(id))?))
}

async fn raster(State(app): State<AppState>, Path(id): Path<u64>) -> Response {
    let uri = match app.lock().image(ImageId(id)) {
        Ok(view) => view.uri,
        Err(e) => return ApiError(e).into_response(),
    };
    let (Some(root), Some(uri)) = (app.raster_root.as_ref(), uri) else {
        return (StatusCode::NOT_FOUND, "no raster for this image").into_response();
    };
    let mime = match uri.rsplit('.').next() {
        Some("png") => "image/png",
        Some("ppm") => "image/x-portable-pixmap",
        _ => "application/octet-stream",
    };
    match tokio::fs::read(root.join(&uri)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(_) => (StatusCode::NOT_FOUND, format!("missing raster {uri}")).into_response(),
    }
}

async fn submit(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    Json(submission): Json<Submission>,
) -> ApiResult<impl Serialize> {
    let outcome = app.lock().submit(ImageId(id), submission)?;
    if outcome.promoted {
        tracing::info!(t = outcome.t, "batch promoted");
    }
    Ok(Json(outcome))
}

async fn advance(State(app): State<AppState>) -> ApiResult<impl Serialize> {
    Ok(Json(app.lock().advance()?))
}

async fn predict(State(app): State<AppState>, Json(request): Json<PredictRequest>) -> ApiResult<impl Serialize> {
    Ok(Json(app.lock().predict(request)?))
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/status", get(status))
        .route("/api/images/{id}", get(image))
        .route("/api/images/{id}/raster", get(raster))
        .route("/api/annotations/{id}", post(submit))
        .route("/api/cycle/advance", post(advance))
        .route("/api/predict", post(predict))
        .with_state(app)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await
}
