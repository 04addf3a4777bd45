use std::path::PathBuf;

/// Errors produced by the ranking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate problem: every item has zero score mass")]
    DegenerateProblem,

    #[error(
        "sinkhorn did not converge after {iterations} iterations (marginal error {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("infeasible marginals: row {user} sums to {row_sum}, expected {k}")]
    InfeasibleMarginals { user: usize, row_sum: f64, k: usize },

    #[error("bids required for eCPM")]
    MissingBids,

    #[error("Gini undefined: all weighted utilities are zero")]
    GiniUndefined,

    #[error("baseline accuracy must be positive, got {0}")]
    NonPositiveBaseline(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of the numerical routines rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::InfeasibleMarginals { .. } | Error::Internal(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
