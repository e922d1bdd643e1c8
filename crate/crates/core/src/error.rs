use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected dimension {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("numeric failure in round {round}: {detail}")]
    NumericFailure { round: usize, detail: String },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },
}

impl FedError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FedError::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        FedError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;
