use thiserror::Error;

use crate::algorithms::RunOutput;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("kappa undefined: worker {worker} has a zero Hessian")]
    UndefinedKappa { worker: usize },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("no finite minimum: {0}")]
    NoFiniteMinimum(String),

    /// The partial output holds every round that completed with finite values.
    #[error("run diverged at round {round}")]
    Diverged { round: usize, partial: Box<RunOutput> },

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
