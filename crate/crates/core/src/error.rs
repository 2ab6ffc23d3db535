use thiserror::Error;

/// Errors surfaced by the library.
///
/// The CLI maps these onto exit codes: input/config errors -> 1,
/// divergence -> 2, invariant failures -> 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid caller-supplied data (shape mismatch, bad value range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A contract between cooperating calls was violated (e.g. backward
    /// invoked with inputs that do not match the forward pass).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid static configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A simulation produced a non-finite value.
    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },

    /// An internal invariant check failed.
    #[error("invariant failure: {0}")]
    Invariant(String),

    /// File format violation (bad magic, version, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
