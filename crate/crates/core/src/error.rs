use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("context of {len} tokens exceeds the model limit of {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("invalid example `{id}`: {reason}")]
    InvalidExample { id: String, reason: String },

    #[error("group is empty")]
    EmptyGroup,

    #[error("group of size {0} is too small for leave-one-out estimation (need at least 2)")]
    GroupTooSmall(usize),

    #[error("length delta must be positive, got {0}")]
    ZeroLengthDelta(f64),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("enumeration space of {size} sequences exceeds the limit of {limit}")]
    SpaceTooLarge { size: usize, limit: usize },

    #[error("objective returned a non-finite value at coordinate {0}")]
    NonFiniteObjective(usize),

    #[error("every question had zero variance; correlation undefined")]
    AllDegenerate,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: unknown token `{symbol}`")]
    UnknownToken { symbol: String, line: usize },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("config error at {pointer}: {msg}")]
    Config { pointer: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
