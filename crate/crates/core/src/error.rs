use thiserror::Error;

/// Errors surfaced by the library. Numerical non-convergence is not an
/// error; it is reported through `converged` flags on results.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid quadrature spec: {0}")]
    InvalidSpec(String),
    #[error("integrand returned non-finite value {value} at x = {at}")]
    NonFiniteIntegrand { at: f64, value: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite field value at index {index}")]
    NonFiniteField { index: usize },
    #[error("ill-conditioned fit: {0}")]
    IllConditionedFit(String),
    #[error("shooting did not converge: {0}")]
    Shooting(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
