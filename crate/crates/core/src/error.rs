use alloc::string::String;
use core::fmt;

/// Errors raised by the upsampling operators and their helpers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid hyper-parameter combination (even kernel size, channel
    /// count not divisible by the group count, ...).
    Config(String),
    /// Tensor or parameter dimensions do not line up.
    Shape(String),
    /// The parameter-free variant needs equal decoder and encoder channels.
    Inapplicable(String),
    /// A forward evaluation produced NaN or infinity.
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Inapplicable(msg) => write!(f, "SAPA-I inapplicable: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
