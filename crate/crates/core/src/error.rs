use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry is not aligned with the mesh: {0}")]
    Alignment(String),

    #[error("density outside the feasible cone: {0}")]
    Domain(String),

    #[error("right-hand side is not orthogonal to the operator kernel (relative defect {defect:e})")]
    Compatibility { defect: f64 },

    #[error("{context} did not converge (relative residual {residual:e})")]
    NumericalFailure { context: String, residual: f64 },

    #[error("dense path limited to {max} unknowns, got {n}; use the matrix-free Hessian product")]
    Capacity { n: usize, max: usize },

    #[error("energy increased at step {step} ({before:e} -> {after:e}); reduce the time step")]
    StepSizeTooLarge { step: usize, before: f64, after: f64 },

    #[error("Newton iteration failed after {iterations} iterations (|grad G| = {residual:e}, sign flip: {sign_flip})")]
    NewtonFailure {
        iterations: usize,
        residual: f64,
        sign_flip: bool,
    },

    #[error("initial iterate is already a critical point (|grad F| = {grad_norm:e})")]
    DegenerateStart { grad_norm: f64 },

    #[error("time step collapsed to {tau:e} during restarts")]
    Stagnation { tau: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
