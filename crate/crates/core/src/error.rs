use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("lookup: {0}")]
    Lookup(String),

    #[error("internal: {0}")]
    Internal(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
    Io,
    Internal,
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) | Error::Config(_) => ErrorClass::Usage,
            Error::Data(_) | Error::Parse { .. } | Error::Alignment(_) | Error::Lookup(_) => {
                ErrorClass::Data
            }
            Error::Dimension { .. } | Error::NonFinite { .. } => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            Error::Internal(_) => ErrorClass::Internal,
        }
    }
}
