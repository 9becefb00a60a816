use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HdnoError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stale trajectories: collected under {level} policy version {collected}, current is {current}")]
    StalePolicy {
        level: &'static str,
        collected: u64,
        current: u64,
    },
}

pub type Result<T> = std::result::Result<T, HdnoError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HdnoError::Invalid(msg.into()))
}
