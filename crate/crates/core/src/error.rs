use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("operator is singular: eigenvalue {eigenvalue:e} is not positive")]
    SingularOperator { eigenvalue: f64 },

    #[error("matrix is numerically singular (pivot {pivot:e})")]
    SingularMatrix { pivot: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("client index {index} out of range for {n_clients} clients")]
    ClientIndex { index: usize, n_clients: usize },

    #[error("step size {gamma} exceeds the contraction gate {limit}")]
    StepSizeGate { gamma: f64, limit: f64 },

    #[error("operation requires a {expected} problem")]
    UnsupportedFamily { expected: &'static str },

    #[error("no convergence after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::StepSizeGate { .. } => 3,
            Error::SingularOperator { .. }
            | Error::SingularMatrix { .. }
            | Error::NoConvergence { .. } => 4,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::SingularOperator { .. } => "singular_operator",
            Error::SingularMatrix { .. } => "singular_matrix",
            Error::InvalidInput(_) => "invalid_input",
            Error::ClientIndex { .. } => "client_index",
            Error::StepSizeGate { .. } => "step_size_gate",
            Error::UnsupportedFamily { .. } => "unsupported_family",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
