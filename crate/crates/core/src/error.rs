//! Error type shared across the toolkit.

use thiserror::Error;

/// Toolkit-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: everything is
/// an input/schema problem (exit 1) except [`Error::Numeric`] (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A JSONL line that cannot be parsed or violates the exchange schema.
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    /// A well-formed exchange whose contents break an operation's contract.
    #[error("dialogue {dialogue_id} turn {turn}: {msg}")]
    Exchange {
        dialogue_id: String,
        turn: u32,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical failure (gradient check, undefined log, empty corpus side).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(line: usize, msg: impl Into<String>) -> Self {
        Error::Schema {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn exchange(dialogue_id: &str, turn: u32, msg: impl Into<String>) -> Self {
        Error::Exchange {
            dialogue_id: dialogue_id.to_string(),
            turn,
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
