use thiserror::Error;

/// Errors raised by the solver library and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature order {quad_order} is smaller than the basis size {k}")]
    QuadOrderTooSmall { k: usize, quad_order: usize },

    #[error("root finder did not converge for node {index} of a {order}-point rule")]
    NoConvergence { order: usize, index: usize },

    #[error("kernel validation failed: {0}")]
    KernelValidation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("implicit operator is singular")]
    SingularMatrix,

    #[error("non-finite value detected at step {step}")]
    NonFinite { step: usize },

    #[error("time step {dt:e} exceeds the stability limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("resolved scheme requested at eps = {eps:e} < 1e-2; set allow_small_eps_resolved to override")]
    CostGuard { eps: f64 },

    #[error("conservation check failed: {0}")]
    Conservation(String),

    #[error("discretization mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::QuadOrderTooSmall { .. }
            | Error::KernelValidation(_)
            | Error::Config(_)
            | Error::CostGuard { .. }
            | Error::Json(_) => 2,
            Error::NoConvergence { .. }
            | Error::SingularMatrix
            | Error::NonFinite { .. }
            | Error::CflViolation { .. }
            | Error::Conservation(_)
            | Error::Mismatch(_) => 3,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
