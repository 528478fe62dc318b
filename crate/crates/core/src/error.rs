use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value outside the mathematical domain of an op (e.g. log of a non-positive number).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("state error: {0}")]
    State(String),

    /// Singular matrices, non-finite losses and similar numerical failures.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error for key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("resolution {index}: {source}")]
    Resolution {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(detail: impl Into<String>) -> Self {
        Error::Argument(detail.into())
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for errors caused by a non-finite value or a singular matrix.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Resolution { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
