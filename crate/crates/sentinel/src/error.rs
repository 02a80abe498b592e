//! Structured errors shared by the CLI and the HTTP service.

use serde::{Deserialize, Serialize};
use sentinel_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Invalid(String),
}

pub type AppResult<T> = Result<T, AppError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

impl AppError {
    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Core(e) => e.kind(),
            AppError::Usage(_) => "Usage",
            AppError::NotFound(_) => "NotFound",
            AppError::Conflict(_) => "Conflict",
            AppError::Invalid(_) => "Invalid",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            kind: self.kind().to_string(),
            message: self.to_string(),
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.body() }).to_string()
    }

    /// Process exit code: 2 for usage and configuration problems, 1 for
    /// everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Core(CoreError::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            AppError::NotFound(_) | AppError::Core(CoreError::FileNotFound(_)) => 404,
            AppError::Conflict(_) => 409,
            AppError::Usage(_) | AppError::Invalid(_) => 400,
            AppError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::SchemaViolation(_)
                | CoreError::ParseError { .. }
                | CoreError::UnknownLabel(_)
                | CoreError::UnknownClass(_)
                | CoreError::EmptyTable => 422,
                CoreError::BackendUnavailable(_) | CoreError::Timeout { .. } => 502,
                _ => 500,
            },
        }
    }
}
