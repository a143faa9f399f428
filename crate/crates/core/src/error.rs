use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("dataset format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at iteration {iteration} (last good iteration: {last_good:?})")]
    TrainingDiverged {
        iteration: u64,
        last_good: Option<u64>,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
