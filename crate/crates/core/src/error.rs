//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("solver diverged at iteration {iteration}: energy became non-finite")]
    Diverged {
        iteration: u32,
        trace: Box<crate::decompose::SolverTrace>,
    },

    #[error("poisson solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    PoissonNoConvergence { residual: f64, iterations: usize },

    #[error("rejection cap exceeded after {0} attempts")]
    RejectionCapExceeded(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
