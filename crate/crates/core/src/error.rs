//! Crate-wide error type and result alias.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Tensor or layer geometry is inconsistent.
    Shape(String),
    /// A component was configured with incompatible parameters.
    Config(String),
    /// Text input (arch config, manifest, predictions) failed to parse.
    Parse {
        line: usize,
        msg: String,
    },
    /// Input data violates a documented contract.
    Data(String),
    /// A numeric guard tripped (e.g. non-positive normalization denominator).
    Numeric(String),
    /// Training loss became non-finite.
    Diverged {
        iteration: usize,
    },
    /// Binary file does not start with the expected magic bytes.
    BadMagic {
        expected: &'static str,
        found: String,
    },
    /// Binary file carries an unsupported format version.
    BadVersion {
        expected: u32,
        found: u32,
    },
    /// Binary file ended before its declared payload.
    Truncated(String),
    /// A sweep evaluation failed for a candidate layer size.
    Sweep {
        size: usize,
        source: Box<Error>,
    },
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Diverged { iteration } => {
                write!(
                    f,
                    "training diverged at iteration {iteration}: loss is not finite"
                )
            }
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Error::BadVersion { expected, found } => {
                write!(
                    f,
                    "unsupported format version {found} (expected {expected})"
                )
            }
            Error::Truncated(msg) => write!(f, "truncated file: {msg}"),
            Error::Sweep { size, source } => {
                write!(f, "sweep evaluation failed at size {size}: {source}")
            }
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Sweep { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}
