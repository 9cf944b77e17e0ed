use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the fusion engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDtype(i16),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("predictor failure: {message}")]
    PredictorFailure {
        message: String,
        /// Captured stdout/stderr of the failing predictor, if any.
        diagnostics: String,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
