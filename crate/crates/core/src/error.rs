use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("class index {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("data generation failed: {0}")]
    GenerationFailure(String),

    #[error("label trajectories were not recorded for this run")]
    NotRecorded,

    #[error("evaluation protocol violated: {0}")]
    ProtocolViolation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::InvalidDimension(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
