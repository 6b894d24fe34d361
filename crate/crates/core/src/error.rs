//! Error types shared across the simulator.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by configuration validation, oracle calls, local training,
/// round orchestration, and data partitioning.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a precondition (checked before a run starts).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An argument to a library call is inconsistent (shape mismatch, empty batch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Protocol-level inconsistency between server and client state.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Local training produced a non-finite loss or gradient.
    #[error("diverged at round {round}, client {client}, interval {interval}, iteration {iteration}")]
    Diverged {
        round: usize,
        client: usize,
        interval: usize,
        iteration: usize,
    },

    /// A non-empty partition could not be produced within the retry budget.
    #[error("partition failure: {0}")]
    PartitionFailure(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed dataset file or artifact.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
