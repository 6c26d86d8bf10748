//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("policy violation: {0}")]
    Policy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("bad magic bytes (expected \"STDT\")")]
    BadMagic,

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("dimension mismatch in container: {0}")]
    DimMismatch(String),

    #[error("duplicate tensor name in container: {0}")]
    DuplicateName(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for input/config problems,
    /// 3 for numerical failures. Usage errors (1) and invariant-suite
    /// failures (4) are assigned by the CLI driver itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::DegenerateInput(_) => 3,
            _ => 2,
        }
    }
}
