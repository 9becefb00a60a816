use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("option {option} never terminates from state {state}")]
    NonTerminating { option: usize, state: usize },
    #[error("horizon {horizon} exceeds the enumeration limit of {limit} steps")]
    HorizonTooLarge { horizon: usize, limit: usize },
    #[error("singular value system")]
    Singular,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(VerifyError::Invalid(msg.into()))
}
