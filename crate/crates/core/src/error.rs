use thiserror::Error;

/// Errors produced by the hp-adaptive library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A Cholesky pivot fell below the admissible threshold.
    #[error("singular system: pivot {pivot:e} at row {row} (diagonal {diagonal:e})")]
    SingularSystem {
        row: usize,
        pivot: f64,
        diagonal: f64,
    },

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    /// The enrichment functions together with the remaining solution part are
    /// (numerically) linearly dependent.
    #[error("dependent enrichment set: {0}")]
    DependentEnrichment(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Failure inside the adaptive loop.
    #[error("adaptive iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
