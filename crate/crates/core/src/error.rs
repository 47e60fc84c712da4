//! Error type shared across the library and the CLI exit-code mapping.

use std::path::PathBuf;

/// Library-wide error.
///
/// Variants group by how the CLI reports them: configuration and shape
/// problems exit with 2, count-level constraint violations with 3, I/O and
/// file-format problems with 4, numeric failures with 5.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("constraint: {0}")]
    Constraint(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: invalid data at byte {offset}: {msg}")]
    Format {
        context: String,
        offset: u64,
        msg: String,
    },

    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 constraint, 4 I/O, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Constraint(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Numeric(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
