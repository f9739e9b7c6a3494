use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed binary container; `offset` is the byte position of the bad field.
    #[error("{file}: at byte {offset}: {message}")]
    Format { file: String, offset: u64, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image id mismatch: {0}")]
    ImageIdMismatch(String),

    #[error("unknown image id {0:?}")]
    UnknownId(String),

    #[error("negative mass {value} at cell {index}")]
    NegativeMass { index: usize, value: f64 },

    #[error("degenerate distribution (total mass below 1e-12)")]
    Degenerate,

    #[error("non-finite loss at step {step} (learning rate {learning_rate})")]
    NonFinite { step: u64, learning_rate: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(file: &str, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.to_string(),
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs rather than failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite { .. })
    }
}
