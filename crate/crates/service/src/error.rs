use agency_core::Error;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};
use thiserror::Error as ThisError;

/// Errors returned by handlers. The body always has `message` and a tagged
/// `error` object; engine errors keep their own serialized form.
#[derive(Debug, ThisError)]
pub enum ApiError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is driven by another actor")]
    ActorConflict(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Core(e) => match e {
                Error::CapabilityDenied { .. } => StatusCode::FORBIDDEN,
                Error::StaleCandidate(_) | Error::SessionFinished => StatusCode::CONFLICT,
                Error::NotFound(_) | Error::MissingLayer(_) => StatusCode::NOT_FOUND,
                Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::BAD_REQUEST,
            },
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::ActorConflict(_) => StatusCode::CONFLICT,
        }
    }

    pub fn body(&self) -> Value {
        let error = match self {
            ApiError::Core(e) => serde_json::to_value(e).unwrap_or_else(|_| json!({"kind": "io"})),
            ApiError::BadRequest(m) => json!({"kind": "bad_request", "detail": m}),
            ApiError::UnknownSession(id) => json!({"kind": "unknown_session", "detail": id}),
            ApiError::ActorConflict(id) => json!({"kind": "actor_conflict", "detail": id}),
        };
        json!({"message": self.to_string(), "error": error})
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

/// Rebuilds an engine error from a response body. Service-only errors map
/// onto the closest engine variant.
pub(crate) fn decode(status: u16, body: &Value) -> Error {
    let error = body.get("error").cloned().unwrap_or(Value::Null);
    if let Ok(e) = serde_json::from_value::<Error>(error.clone()) {
        return e;
    }
    let detail = error.get("detail").and_then(Value::as_str).unwrap_or_default().to_string();
    match error.get("kind").and_then(Value::as_str) {
        Some("bad_request") => Error::Schema(detail),
        Some("unknown_session") => Error::NotFound(format!("session {detail}")),
        Some("actor_conflict") => Error::InvalidParams(format!("session {detail} has another actor")),
        _ => Error::Io(format!("HTTP {status}: {body}")),
    }
}
