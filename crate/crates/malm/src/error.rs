use thiserror::Error;

/// Errors produced by problem evaluation, linear algebra, and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix `{0}` must be symmetric")]
    NotSymmetric(&'static str),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("evaluation of {what} returned a non-finite value")]
    NonFiniteEvaluation { what: &'static str },

    #[error("KKT matrix is numerically singular")]
    SingularSystem,

    #[error("inertia correction failed: shift schedule exhausted after {trials} trials")]
    RegularizationFailed { trials: usize },

    #[error("line search failed: step length fell below {floor:e}")]
    LineSearchFailed { floor: f64 },

    #[error("step is not a descent direction for the merit function (slope {slope:e})")]
    NotDescentDirection { slope: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
