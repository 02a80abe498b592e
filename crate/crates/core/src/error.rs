use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can surface. Variants map one-to-one onto the
/// error kinds callers are expected to branch on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("parse error at line {line}: {reason}")]
    ParseError { line: u64, reason: String },

    #[error("table has no columns")]
    EmptyTable,

    #[error("unknown label: {0:?}")]
    UnknownLabel(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend timed out after {deadline_ms} ms")]
    Timeout { deadline_ms: u64 },

    #[error("replay miss for request {0}")]
    ReplayMiss(String),

    #[error("malformed model output after {attempts} attempt(s): {reason}")]
    MalformedOutput {
        attempts: u32,
        reason: String,
        last_output: String,
    },

    #[error("no sensitivity rules could be extracted from document {0}")]
    ExtractionEmpty(String),

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("rulebook store has no `default` rulebook")]
    StoreMissingDefault,

    #[error("verdict list is empty")]
    EmptyVerdictList,

    #[error("missing prediction for table {table_id} column {column_index}")]
    MissingPrediction { table_id: String, column_index: usize },

    #[error("unknown class: {0}")]
    UnknownClass(String),

    #[error("length mismatch: {left} predictions vs {right} gold labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),

    #[error("scan failed: {failed} of {total} columns errored (last: {last_error})")]
    ScanFailed {
        failed: usize,
        total: usize,
        last_error: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant, used in structured error
    /// bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FileNotFound(_) => "NotFound",
            Error::ParseError { .. } => "ParseError",
            Error::EmptyTable => "EmptyTable",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::BackendUnavailable(_) => "BackendUnavailable",
            Error::Timeout { .. } => "Timeout",
            Error::ReplayMiss(_) => "ReplayMiss",
            Error::MalformedOutput { .. } => "MalformedOutput",
            Error::ExtractionEmpty(_) => "ExtractionEmpty",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::StoreMissingDefault => "StoreMissingDefault",
            Error::EmptyVerdictList => "EmptyVerdictList",
            Error::MissingPrediction { .. } => "MissingPrediction",
            Error::UnknownClass(_) => "UnknownClass",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::IncompatibleReports(_) => "IncompatibleReports",
            Error::ScanFailed { .. } => "ScanFailed",
            Error::Config(_) => "Config",
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
        }
    }
}
