//! Error types shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
///
/// `Contract` marks a violated precondition or invariant (caller bug or bad
/// input values), `Io` wraps filesystem failures with the offending path, and
/// `Parse` marks malformed file contents.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns a `Contract` error unless the condition holds.
#[macro_export]
macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
