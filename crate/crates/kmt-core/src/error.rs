//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// An attribute pool cannot satisfy a request (for example more unique
    /// full names demanded than the name pools can produce).
    #[error("pool exhausted: {0}")]
    PoolExhausted(String),

    /// Pool or template data failed validation.
    #[error("invalid data file: {0}")]
    DataFile(String),

    /// Text contains an atom outside the closed vocabulary.
    #[error("unknown token {atom:?} in {context}")]
    UnknownToken { atom: String, context: String },

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training could not proceed (non-finite loss/gradient, bad batch, ...).
    #[error("training error: {0}")]
    Train(String),

    /// Evaluation request is inconsistent with the task set.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (config/data validation,
    /// mismatched or missing artifacts) rather than internal runtime
    /// failures; the CLI maps these to exit code 1 and everything else to
    /// exit code 2.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::DataFile(_)
            | Error::PoolExhausted(_)
            | Error::Checkpoint(_)
            | Error::Eval(_)
            | Error::UnknownToken { .. } => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
