use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside the message range [-1, 1]")]
    OutOfRange { value: f64 },

    #[error("invalid quantizer interval {0}: 2/delta must be a positive integer")]
    InvalidDelta(f64),

    #[error("bin {k} outside 0..={max}")]
    BinOutOfRange { k: usize, max: usize },

    #[error("digit {digit} out of range for message length {len}")]
    DigitOutOfRange { digit: usize, len: usize },

    #[error("message index {index} out of range for batch of {n}")]
    MessageOutOfRange { index: usize, n: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {0} is not recorded on this tape")]
    ForeignNode(usize),

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error("empty histogram: no symbol has a nonzero count")]
    EmptyHistogram,

    #[error("symbol {0} has no codeword")]
    UnknownSymbol(usize),

    #[error("bitstream truncated after {0} bits")]
    Truncated(usize),

    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),

    #[error("invalid action {action} for agent {agent}")]
    InvalidAction { agent: usize, action: usize },

    #[error("step called after the episode finished")]
    EpisodeDone,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
