use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::{Deserialize, Serialize};
use xmodal_core::Error;

/// JSON error body: a stable machine code plus a human message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

/// Machine code and HTTP status for each library error.
pub fn classify(err: &Error) -> (&'static str, StatusCode) {
    match err {
        Error::Dimension { .. } => ("dimension_mismatch", StatusCode::BAD_REQUEST),
        Error::Shape(_) => ("shape_mismatch", StatusCode::BAD_REQUEST),
        Error::Contract(_) => ("contract_violation", StatusCode::CONFLICT),
        Error::NonFinite { .. } => ("non_finite", StatusCode::UNPROCESSABLE_ENTITY),
        Error::InvalidArgument(_) => ("invalid_argument", StatusCode::BAD_REQUEST),
        Error::Training { .. } => ("training_diverged", StatusCode::INTERNAL_SERVER_ERROR),
        Error::Numeric { .. } => ("numeric_failure", StatusCode::INTERNAL_SERVER_ERROR),
        Error::Format(_) => ("format_error", StatusCode::UNPROCESSABLE_ENTITY),
        Error::Io(_) => ("io_error", StatusCode::INTERNAL_SERVER_ERROR),
        Error::Json(_) => ("json_error", StatusCode::BAD_REQUEST),
    }
}

impl ApiError {
    pub fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "malformed_request",
            message: message.into(),
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.to_string(),
            message: self.message.clone(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let (code, status) = classify(&err);
        Self {
            status,
            code,
            message: err.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        Self::bad_request(rejection.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(rejection: QueryRejection) -> Self {
        Self::bad_request(rejection.body_text())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, axum::Json(self.body())).into_response()
    }
}
