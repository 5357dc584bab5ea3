//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported parameter: {0}")]
    UnsupportedParameter(String),

    #[error("non-finite values at integration step {step}: {context}")]
    Divergence { step: usize, context: String },

    #[error("line search stalled after {shrinks} shrinks at iteration {iteration} (best energy {best_energy:.6e})")]
    Stall {
        iteration: usize,
        shrinks: usize,
        best_energy: f64,
        /// Best iterate found before the stall.
        best_momentum: Box<crate::field::VectorField>,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
