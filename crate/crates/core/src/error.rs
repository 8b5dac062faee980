//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shape rule violated by a tensor primitive; names the primitive and
    /// the offending shapes.
    Shape { op: &'static str, detail: String },
    /// Invalid argument or state outside the tensor shape rules.
    Invalid(String),
    /// Configuration file / CLI problem.
    Config(String),
    /// Dataset or CSV ingestion problem, with location where known.
    Data(String),
    /// Non-finite value detected where finiteness is required.
    NonFinite(String),
    Io(std::io::Error),
    /// An error wrapped with extra context (e.g. which network block failed).
    Context { ctx: String, source: Box<Error> },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Wrap with a context prefix, used to name the block or stage that failed.
    pub fn context(self, ctx: impl Into<String>) -> Self {
        Error::Context { ctx: ctx.into(), source: Box::new(self) }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: {detail}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Context { ctx, source } => write!(f, "{ctx}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Context { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
