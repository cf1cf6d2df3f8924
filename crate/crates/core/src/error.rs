use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The data-consistency denominator `m + rho` vanishes or changes sign.
    #[error("division hazard: {0}")]
    DivisionHazard(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Training produced a NaN/Inf; `class` names the first offending parameter class.
    #[error("non-finite value in parameter class `{class}` at step {step}")]
    NonFinite { class: String, step: usize },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
