use thiserror::Error;

use crate::model::Solution;

/// Errors raised by the fleet solvers and their I/O layers.
#[derive(Debug, Error)]
pub enum FleetError {
    #[error("domain error: {0}")]
    Domain(String),

    /// A Gram matrix that must be inverted is rank deficient.
    #[error("singular system in {context}: rank {rank} < {dim}")]
    Singular {
        context: String,
        rank: usize,
        dim: usize,
    },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
        last: Option<Box<Solution>>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    /// Exhaustive enumeration refused because it would exceed the configured cap.
    #[error("refusing to enumerate {count} hypotheses (cap {cap}); use the convex relaxation solver instead")]
    Refusal { count: u128, cap: u128 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FleetError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FleetError::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, FleetError>;
