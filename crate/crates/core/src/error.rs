//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A file or byte stream did not conform to the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// Input data violated an invariant (non-finite values, out of range).
    #[error("data error: {0}")]
    Data(String),
    /// An inconsistent run configuration (role mismatch, empty archive, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric computation produced a non-finite value.
    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    /// A pipeline phase failure, tagged with the phase that raised it.
    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(stage: impl Into<String>, e: Error) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(e) }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
