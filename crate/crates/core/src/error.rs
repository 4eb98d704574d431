//! Error type shared by all modules.

use nalgebra::DMatrix;

/// Errors produced by model construction, solvers, and generators.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix/vector dimensions do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A matrix required to be invertible is (numerically) singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A matrix required to be symmetric positive definite is not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data is degenerate (zero variance, rank deficient, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative solver exhausted its iteration budget. Carries the last
    /// iterate and the remaining convergence gap so callers can inspect or
    /// keep it.
    #[error("no convergence after {iterations} iterations (gap {gap:.3e})")]
    NoConvergence {
        iterations: usize,
        gap: f64,
        last: Box<DMatrix<f64>>,
    },

    /// A numeric computation produced an invalid result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An EM substep failed; wraps the underlying error with the stage name
    /// and iteration index.
    #[error("EM stage '{stage}' failed at iteration {iteration}: {source}")]
    EmStage {
        stage: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str, iteration: usize) -> Error {
        Error::EmStage {
            stage,
            iteration,
            source: Box::new(self),
        }
    }
}
