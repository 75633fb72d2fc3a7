use alloc::string::String;

/// Errors raised by the model, sampling and training code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("sampling error ({strategy}): {reason}")]
    Sampling { strategy: &'static str, reason: String },
    #[error("attention error: {0}")]
    Attention(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parameter map error: {0}")]
    ParamMap(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
