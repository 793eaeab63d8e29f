use arbot_client::api::{ErrorBody, ErrorDetail, SCHEMA_VERSION};
use arbot_core::archive::ArchiveError;
use arbot_core::demo::DemoError;
use arbot_core::export::ExportError;
use arbot_core::pipeline::PipelineError;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;

/// Error reply: `{"error": {"code", "message"}}` with a matching status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn invalid_state(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "invalid_state", message)
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.code.to_string(), message: self.message } };
        (self.status, Json(body)).into_response()
    }
}

impl From<DemoError> for ApiError {
    fn from(e: DemoError) -> Self {
        let unprocessable = StatusCode::UNPROCESSABLE_ENTITY;
        match e {
            DemoError::UnreachableKeypoint(_) => Self::new(unprocessable, "unreachable_keypoint", e.to_string()),
            DemoError::PlanningFailed(_) => Self::new(unprocessable, "planning_failed", e.to_string()),
            DemoError::AllSamplesUnreachable => Self::new(unprocessable, "all_samples_unreachable", e.to_string()),
            DemoError::Cancelled => Self::new(StatusCode::CONFLICT, "cancelled", e.to_string()),
            DemoError::EmptySession => Self::new(StatusCode::CONFLICT, "empty_session", e.to_string()),
            DemoError::Finalized => Self::invalid_state(e.to_string()),
            DemoError::EmptyTrack | DemoError::MissingGoal => Self::bad_request(e.to_string()),
            DemoError::Kinematics(_) => Self::new(unprocessable, "kinematics", e.to_string()),
        }
    }
}

impl From<ExportError> for ApiError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io { .. } => Self::internal(e.to_string()),
            _ => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "export_failed", e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Archive(ArchiveError::NotFound(p)) => {
                Self::new(StatusCode::NOT_FOUND, "scene_not_found", format!("no scene archive at {}", p.display()))
            }
            PipelineError::Archive(a) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "scene_corrupt", a.to_string()),
            PipelineError::Demo(d) => d.into(),
            PipelineError::Export(x) => x.into(),
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "scene_corrupt", other.to_string()),
        }
    }
}

/// Request bodies that carry an optional schema version.
pub trait Versioned {
    fn schema_version(&self) -> Option<u32>;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(
        impl Versioned for $t {
            fn schema_version(&self) -> Option<u32> {
                self.schema_version
            }
        }
    )*};
}

versioned!(
    arbot_client::api::CreateSessionRequest,
    arbot_client::api::AnchorRequest,
    arbot_client::api::ModeRequest,
    arbot_client::api::KeypointRequest,
    arbot_client::api::PoseRequest,
    arbot_client::api::AcceptRequest,
    arbot_client::api::FinalizeRequest
);

/// JSON body extractor whose rejections use the structured error format
/// and which checks `schema_version`.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    S: Send + Sync,
    T: DeserializeOwned + Versioned,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let Json(value) = Json::<T>::from_request(req, state)
            .await
            .map_err(|rej| match rej.status() {
                StatusCode::UNSUPPORTED_MEDIA_TYPE => {
                    ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type", rej.body_text())
                }
                _ => ApiError::bad_request(rej.body_text()),
            })?;
        match value.schema_version() {
            Some(v) if v != SCHEMA_VERSION => {
                Err(ApiError::bad_request(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")))
            }
            _ => Ok(ApiJson(value)),
        }
    }
}
