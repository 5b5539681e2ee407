use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("training diverged at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },
    #[error("sampling failed at step {step}: {reason}")]
    SamplingFailure { step: usize, reason: String },
    #[error("integration failed at step {step}: {reason}")]
    IntegrationFailure { step: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
