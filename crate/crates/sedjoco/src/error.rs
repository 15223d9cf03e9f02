use thiserror::Error;

/// Errors surfaced by the solver, the covariance machinery and the harness.
#[derive(Error, Debug)]
pub enum Error {
    /// Inconsistent or unsupported problem dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A multi-index fell outside the valid range for the given dimensions.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A covariance matrix that must be positive definite failed its
    /// Cholesky factorization.
    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    /// The Newton correction matrix is numerically singular.
    #[error("singular correction matrix (condition estimate {cond:.3e})")]
    SingularJacobian { cond: f64 },

    /// Newton iteration exhausted its budget; `history` holds the residual
    /// norm after each iteration for diagnosis.
    #[error("no convergence after {iterations} iterations (last residual {last:.3e})")]
    NoConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    /// A filter bank violates the energy normalization contract.
    #[error("filter bank violates energy normalization: {0}")]
    UnnormalizedBank(String),

    /// A configuration file or CLI override could not be interpreted.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
