use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("not a probability vector: {0}")]
    NotOnSimplex(String),

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The direct-mode Gibbs kernel would underflow; log-domain mode is required.
    #[error("kernel exponent max(C)/(2 eps) = {exponent:.3} exceeds {limit}; use log-domain mode")]
    KernelRange { exponent: f64, limit: f64 },

    #[error("numerical underflow in {0}; log-domain kernel mode is required")]
    Underflow(&'static str),

    #[error("Sinkhorn did not converge in {sweeps} sweeps (marginal error {marginal_error:.3e})")]
    SinkhornNotConverged { sweeps: usize, marginal_error: f64 },

    /// Power-law fixed point produced non-positive or non-finite scalings.
    #[error("fixed-point iterate left the positive cone at coordinates {coordinates:?}")]
    PositiveCone { coordinates: Vec<usize> },

    #[error("Newton did not converge in {iterations} iterations (half squared decrement {decrement:.3e})")]
    NewtonNotConverged { iterations: usize, decrement: f64 },

    #[error("backtracking line search failed (step {step:.3e}, half squared decrement {decrement:.3e})")]
    LineSearch { step: f64, decrement: f64 },

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("worker {index}: {source}")]
    Worker {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error{}: {message}", location.as_deref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Config {
        location: Option<String>,
        message: String,
    },

    #[error("too many summands for enumeration: {0} (at most 8)")]
    TooManySummands(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_worker(self, index: usize) -> Self {
        Error::Worker {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
