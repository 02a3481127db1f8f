use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument value is outside the accepted domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A structurally valid request that the current state cannot serve
    /// (e.g. backward on a non-scalar, scoring with mismatched widths).
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration that is syntactically fine but semantically impossible.
    #[error("configuration error: {0}")]
    Config(String),

    /// Failure talking to an external text-generation endpoint.
    #[error("text generation transport error: {0}")]
    Transport(String),

    /// The generator replied, but nothing usable could be parsed out.
    #[error("text generation produced no usable records: {0}")]
    Generation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    /// A checkpoint file is malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
