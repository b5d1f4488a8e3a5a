use thiserror::Error;

/// Errors produced by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("non-finite loss in {stage} at step {step}: {value}")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        value: f64,
    },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
