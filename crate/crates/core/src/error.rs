use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("version mismatch in {what}: expected {expected}, found {found}")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format(_) => "E_FORMAT",
            Error::Validation(_) => "E_VALIDATION",
            Error::Shape(_) => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Version { .. } => "E_VERSION",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
