use alloc::string::String;
use core::fmt;

/// Errors surfaced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    Shape(String),
    /// A configuration value violates a precondition (divisibility, ranges).
    Config(String),
    /// Non-finite values or other numeric failures.
    Numeric(String),
    /// Required runtime state is missing (e.g. feature cache not populated).
    State(String),
    /// Sequence exceeds the decoder capacity.
    Capacity(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Capacity(m) => write!(f, "capacity error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Numeric(alloc::format!($($arg)*))
    };
}

pub(crate) use {config_err, numeric_err, shape_err};
