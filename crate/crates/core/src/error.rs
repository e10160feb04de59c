use thiserror::Error;

use crate::neural::ScoreNet;

/// Errors surfaced by the discovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("graph contains a cycle")]
    Cycle,

    #[error("non-numeric value {value:?} at row {row}, column {column} ({label})")]
    NonNumeric {
        row: usize,
        column: usize,
        label: String,
        value: String,
    },

    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },

    #[error("kernel matrix is not positive definite (jitter reached {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    /// Training loss became NaN/Inf. Carries the last finite checkpoint.
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<ScoreNet>,
    },

    #[error("leaf {leaf}: curvature vanished on {excluded} of {total} samples")]
    DegenerateCurvature {
        leaf: usize,
        excluded: usize,
        total: usize,
    },

    #[error("greedy ordering aborted after {} leaves: {source}", partial.len())]
    GreedyAborted {
        partial: Vec<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Diverged { .. }
            | Error::DegenerateCurvature { .. } => true,
            Error::GreedyAborted { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
