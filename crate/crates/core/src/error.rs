use thiserror::Error;

use crate::training::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value showed up while evaluating a loss or its gradient.
    #[error("poisoned gradient: non-finite value in {term}")]
    PoisonedGradient { term: String },

    /// Validation loss became non-finite. Carries everything recorded so far.
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        report: Box<TrainReport>,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite, got {value}")))
    }
}
