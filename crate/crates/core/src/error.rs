use thiserror::Error;

use crate::heads_registry::bundle::BundleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    Vocab { id: usize, vocab_size: usize },

    #[error("input of length {len} exceeds maximum sequence length {max}")]
    Length { len: usize, max: usize },

    #[error("empty loss: every position is ignored")]
    EmptyLoss,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("registration error: {0}")]
    Registration(String),

    #[error("unknown domain `{domain}`; registered domains: [{}]", known.join(", "))]
    UnknownDomain { domain: String, known: Vec<String> },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
