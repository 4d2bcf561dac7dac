use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use hitta_core::Error;

use crate::api::ErrorBody;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    pub fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "session is adapting; retry when it is ready")
    }

    /// Errors while building a session are the client's fault: a bad
    /// dataset path or checkpoint.
    pub fn bad_request(e: Error) -> Self {
        let status = match e {
            Error::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Conflict(_) | Error::Exhausted => StatusCode::CONFLICT,
            Error::Validation(_) | Error::Shape(_) | Error::Format { .. } | Error::DegenerateMask(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(error = %self.message, "request failed");
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}
