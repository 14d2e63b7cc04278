use thiserror::Error;

/// Errors raised by the laboratory.
///
/// Variants are split by how a caller should react: contract violations are
/// bad input, numerical failures are runtime breakdowns of a computation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("not a probability distribution: entries sum to {sum}")]
    NotDistribution { sum: f64 },

    #[error("causal violation: key position {key} is after query position {query}")]
    Causal { query: usize, key: usize },

    #[error("overflow rounding {value} into {format}")]
    Overflow { value: f64, format: &'static str },

    #[error("numerical failure at layer {layer}, token {token}: {what}")]
    Numerical { layer: usize, token: usize, what: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl LabError {
    pub fn contract(msg: impl Into<String>) -> Self {
        LabError::Contract(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        LabError::Validation(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Numerical { .. } | LabError::Overflow { .. } | LabError::Invariant(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
