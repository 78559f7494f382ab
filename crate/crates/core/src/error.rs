use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("class `{0}` has no samples")]
    MissingClass(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("optimizer failed on every restart: {0}")]
    OptimizerFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
