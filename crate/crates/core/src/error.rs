//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("backbone tensor `{0}` must be frozen during adapter training")]
    NotFrozen(String),

    #[error("injection level {level}: feature dims {got} do not match decoder site {expected}")]
    InjectionMismatch {
        level: usize,
        expected: String,
        got: String,
    },

    #[error("synthesis stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(String),
}

impl Error {
    /// Wrap an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn dim_mismatch(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Error {
        Error::DimMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn invalid(name: &'static str, reason: impl ToString) -> Error {
        Error::InvalidParameter {
            name,
            reason: reason.to_string(),
        }
    }
}

impl From<::image::ImageError> for Error {
    fn from(e: ::image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}
