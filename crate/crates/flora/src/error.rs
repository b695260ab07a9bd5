//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor math, adapter wiring, model execution,
/// training, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation. Names both shapes.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Index range outside a tensor's extent.
    #[error("bounds error in {op}: [{from}, {to}) not within 0..{extent}")]
    Bounds {
        op: &'static str,
        from: usize,
        to: usize,
        extent: usize,
    },

    /// A stated precondition does not hold (e.g. divisibility for repeat-and-add).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Invalid configuration (adapter spec, model shape, run config).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was broken by the caller (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// KV cache grew past the configured maximum sequence length.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Malformed or truncated checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: impl std::fmt::Display, rhs: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}
