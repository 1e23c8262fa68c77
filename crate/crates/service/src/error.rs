use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

/// Error returned to HTTP clients as `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn unknown_frame(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_frame", format!("no frame named {id:?}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<hahog::Error> for ApiError {
    fn from(e: hahog::Error) -> Self {
        use hahog::Error as E;
        let (status, code) = match &e {
            E::UnknownDetection(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_detection"),
            E::Bounds(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds"),
            E::Io { .. } | E::MalformedHeader { .. } | E::TruncatedPayload { .. } | E::MissingSidecar(_) | E::Json { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "data_error")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

/// Failures while starting or stopping the service.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] hahog::Error),

    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error("server error: {0}")]
    Server(#[source] std::io::Error),

    #[error("corpus error: {0}")]
    Corpus(String),
}
