use std::io;

use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid token {id}: {reason}")]
    InvalidToken { id: TokenId, reason: String },

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("non-finite activation in layer {layer} ({site})")]
    NumericOverflow { layer: usize, site: &'static str },

    #[error("non-finite gradient in {tensor} (first bad index {index})")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(position: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            position,
            message: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
