use thiserror::Error;

use crate::nested::FilterTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, counts or invariants of the inputs do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A covariance could not be factorized even at the largest jitter level.
    #[error("numerical degeneracy in {context}: {detail}")]
    NumericalDegeneracy {
        context: &'static str,
        detail: String,
    },

    /// Every log-weight is -inf.
    #[error("degenerate weights: all {count} log-weights are -inf")]
    DegenerateWeights { count: usize },

    /// A state became non-finite during integration.
    #[error("divergence at {location}: non-finite entry at coordinate {coordinate}")]
    Divergence { location: String, coordinate: usize },

    /// Every parameter particle received zero weight at time `t`.
    #[error("filter collapse at t = {t}: all parameter particles have zero weight")]
    FilterCollapse { t: usize, partial: Box<FilterTrace> },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }
}
