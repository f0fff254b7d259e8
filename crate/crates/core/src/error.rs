use thiserror::Error;

/// Errors raised by the numerical layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("grid mismatch: expected {expected} cells, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("input has non-zero mean {mean:e}")]
    NonZeroMean { mean: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("negative state after step: min {min:e}")]
    NegativeState { min: f64 },
    #[error("CFL condition violated: {0}")]
    Cfl(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
