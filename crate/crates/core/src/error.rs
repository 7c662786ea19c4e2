use thiserror::Error;

/// Broad error classes; the CLI maps each to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum PfaError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value at row {row}, variable {variable:?}")]
    NonFiniteInput { row: usize, variable: String },

    #[error("cannot parse {value:?} at row {row}, column {column:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error(
        "perturbation matrix for {unit} is numerically singular (condition number {condition:.3e})"
    )]
    Singular { unit: String, condition: f64 },

    #[error("non-finite state at iteration {iteration} after updating {block}")]
    NonFiniteState {
        iteration: usize,
        block: &'static str,
    },

    #[error("matrix is not positive definite in {0}")]
    NotPositiveDefinite(String),

    #[error("chain mixes ranks {ranks:?}; filter draws to a single rank before alignment")]
    MixedRank { ranks: Vec<usize> },

    #[error("unknown group label {0:?}")]
    UnknownGroup(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(
        "group {group:?} has {size} observation(s), too few to split into training and test halves"
    )]
    CannotSplit { group: String, size: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PfaError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PfaError::Config(_) | PfaError::Json(_) => ErrorClass::Config,
            PfaError::Singular { .. }
            | PfaError::NonFiniteState { .. }
            | PfaError::NotPositiveDefinite(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, PfaError>;
