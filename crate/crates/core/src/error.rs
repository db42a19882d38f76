use thiserror::Error;

/// Errors raised by the model, sensing, measurement, reconstruction and analysis stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("distribution is not normalized (sum = {0})")]
    Unnormalized(f64),

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
