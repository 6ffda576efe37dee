use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration field violates its invariant.
    Config { field: &'static str, message: String },
    /// Tensor shapes are incompatible with the requested operation.
    Shape(String),
    /// A loss term evaluated to NaN or infinity.
    NonFinite { term: &'static str },
    /// Caller violated an operation precondition.
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config { field, message: message.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { field, message } => write!(f, "invalid config field `{field}`: {message}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite { term } => write!(f, "non-finite loss term `{term}`"),
            Error::Invalid(m) => write!(f, "{m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
