//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text; `line` is 1-based within the offending document.
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },

    /// A structural invariant of a parsed or constructed value is violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("unknown rank {0}")]
    UnknownRank(u32),

    /// Counter-file read or parse failure; always names the path.
    #[error("{path}: {msg}")]
    CounterFile { path: String, msg: String },

    /// `region_end` for a region that is not on top of the stack.
    #[error("stack discipline violation: expected to end '{expected}', got '{actual}'")]
    StackDiscipline { expected: String, actual: String },

    #[error("open regions: {0}")]
    OpenRegions(String),

    /// Data-level error (mismatched files, inconsistent sensors, ...).
    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn syntax(line: usize, msg: impl Into<String>) -> Self {
        Error::Syntax {
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
