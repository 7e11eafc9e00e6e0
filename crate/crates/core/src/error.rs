use thiserror::Error;

/// Every failure mode of the laboratory, grouped by what went wrong.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric-domain error: {0}")]
    NumericDomain(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad user input rather than by the numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument(_) | Error::Io(_) | Error::Format(_) | Error::Json(_)
        )
    }

    /// A copy of this error with `context` prefixed to its message. The
    /// variant is kept, except that JSON errors become format errors.
    pub fn with_context(&self, context: &str) -> Error {
        let msg = |m: &dyn std::fmt::Display| format!("{context}: {m}");
        match self {
            Error::Shape(m) => Error::Shape(msg(m)),
            Error::NumericDomain(m) => Error::NumericDomain(msg(m)),
            Error::NonFinite(m) => Error::NonFinite(msg(m)),
            Error::Parameter(m) => Error::Parameter(msg(m)),
            Error::DegenerateBatch(m) => Error::DegenerateBatch(msg(m)),
            Error::Index(m) => Error::Index(msg(m)),
            Error::Config(m) => Error::Config(msg(m)),
            Error::InsufficientData(m) => Error::InsufficientData(msg(m)),
            Error::Argument(m) => Error::Argument(msg(m)),
            Error::Format(m) => Error::Format(msg(m)),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), msg(e))),
            Error::Json(e) => Error::Format(msg(e)),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
