//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Removing every entry from an option space.
    #[error("empty option space")]
    EmptyOptionSpace,

    /// An original index that is not present in the space.
    #[error("unknown index {0}")]
    UnknownIndex(usize),

    /// An instance violated a domain invariant at construction or load.
    #[error("invalid instance {uid}: {reason}")]
    InvalidInstance { uid: String, reason: String },

    /// A prior was applied to a space of a different size or label set.
    #[error("prior/space size mismatch: {0}")]
    PriorMismatch(String),

    /// Gold option is absent from a reduced space (confidence-shift scenario 1).
    #[error("gold not in reduced space")]
    GoldEliminated,

    /// A caller violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Transport-level backend failure after all retries.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// A backend response that could not be decoded into the expected shape.
    #[error("malformed backend response: {0}")]
    Decode(String),

    /// The backend cannot serve the requested operation at all.
    #[error("backend capability missing: {0}")]
    Capability(String),

    /// Replay-only mode hit a request that is not in the cache.
    #[error("cache miss in replay-only mode (digest {digest}); re-run without --replay-only to populate the cache")]
    ReplayMiss { digest: String },

    /// Dataset file or record problem.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Configuration file, flag, or environment problem.
    #[error("config error: {0}")]
    Config(String),

    /// The evaluation exceeded the failed-cell budget and was aborted.
    #[error("evaluation aborted: {failed} of {total} cells failed (>5%)")]
    Aborted { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Transport failures may be retried; everything else is final.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
