//! Exit codes.
//!
//! | code | meaning                                          |
//! |------|--------------------------------------------------|
//! | 0    | success                                          |
//! | 1    | backend failure (transport, HTTP status, limits) |
//! | 2    | every record fell back after invalid replies     |
//! | 64   | usage or configuration error                     |
//! | 65   | malformed input data                             |
//! | 66   | input file missing or unreadable                 |
//! | 74   | output could not be written                      |

use std::fmt;
use std::path::Path;

use ctxpipe::Error;

pub const OK: u8 = 0;
pub const BACKEND: u8 = 1;
pub const DEGRADED: u8 = 2;
pub const USAGE: u8 = 64;
pub const DATA: u8 = 65;
pub const NO_INPUT: u8 = 66;
pub const IO: u8 = 74;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub type Outcome<T = u8> = Result<T, Failure>;

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(USAGE, message)
    }

    pub fn no_input(path: &Path, cause: impl fmt::Display) -> Self {
        Failure::new(NO_INPUT, format!("cannot read {}: {cause}", path.display()))
    }

    pub fn write(path: &Path, cause: impl fmt::Display) -> Self {
        Failure::new(IO, format!("cannot write {}: {cause}", path.display()))
    }

    /// A library error raised while reading `path`.
    pub fn from_core_at(e: Error, path: &Path) -> Self {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Backend { .. } | Error::DimensionMismatch { .. } | Error::ZeroVector(_) | Error::Unrepairable => {
                BACKEND
            }
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => NO_INPUT,
            Error::Io(_) => IO,
            Error::Parse(_) | Error::Validation { .. } | Error::MalformedOutput(_) | Error::SchemaViolation(_) => DATA,
            Error::Config(_) | Error::Domain(_) | Error::NotFound(_) | Error::LeafNode(_) => USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
