use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no users survive filtering")]
    EmptyDataset,

    #[error("sequence of user {user} has length {len}, need at least {min}")]
    SequenceTooShort { user: usize, len: usize, min: usize },

    #[error("item id {item} out of range for catalog of size {size}")]
    InvalidItem { item: usize, size: usize },

    #[error("no title for item {0}")]
    MissingTitle(usize),

    #[error("prompt has {tokens} tokens, backbone context holds {max}")]
    ContextOverflow { tokens: usize, max: usize },

    #[error("prefix for layer {layer} has shape {got:?}, expected {expected:?}")]
    PrefixShape {
        layer: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("function is not deterministic: f(θ) evaluated to {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
