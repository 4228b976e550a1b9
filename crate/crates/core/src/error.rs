use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("feature index {index} out of range for {num_features} features")]
    FeatureOutOfRange { index: usize, num_features: usize },

    #[error("duplicate feature index {0} in one instance")]
    DuplicateFeature(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        /// Last parameters for which the objective was finite.
        last_finite: Box<crate::params::VariationalParams>,
    },

    #[error("elicitation: {0}")]
    Elicitation(String),

    #[error("item {0} is not awaiting an answer")]
    NotPending(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
