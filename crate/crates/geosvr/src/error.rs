//! Error taxonomy shared by the library and the CLI exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    /// Bad arguments, malformed config, or malformed input data.
    #[error("configuration error: {0}")]
    Config(String),
    /// Filesystem failures, reported with the offending path.
    #[error("io error: {0}")]
    Io(String),
    /// Non-finite losses/gradients or a failed numeric certification.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An internal structural invariant was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl EngineError {
    /// Process exit code: 2 argument/config/data, 3 numeric, 4 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::Io(_) => 2,
            EngineError::Numeric(_) => 3,
            EngineError::Invariant(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> EngineError {
        EngineError::Io(format!("{}: {err}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;
