//! Ports and adapters for obtaining ID-token probabilities, continuation
//! log-probabilities, and generated text from a model.
//!
//! Backends are safe for concurrent in-flight requests up to the harness
//! parallelism bound. Requests are canonicalized and content-addressed so
//! the replay cache can make any backend observationally deterministic.

mod cache;
mod http;
mod mock;
mod synthetic;

pub use cache::{load_entries, CacheEntry, ReplayBackend};
pub use http::{HttpBackend, HttpConfig, LabelTokenStyle};
pub use mock::MockBackend;
pub use synthetic::{visible_texts, SlotKind, SyntheticBackend, SyntheticConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::core::OptionLabel;
use crate::error::{Error, Result};

/// Sum of per-token log-probabilities of a continuation, with its length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScore {
    pub total_logprob: f64,
    pub token_count: usize,
}

impl ContinuationScore {
    pub fn new(total_logprob: f64, token_count: usize) -> Result<Self> {
        if token_count == 0 {
            return Err(Error::Decode("continuation scored zero tokens".to_string()));
        }
        if !(total_logprob <= 0.0) {
            return Err(Error::Decode(format!(
                "continuation log-probability {total_logprob} is positive"
            )));
        }
        Ok(ContinuationScore { total_logprob, token_count })
    }

    pub fn average(&self) -> f64 {
        self.total_logprob / self.token_count as f64
    }
}

/// A model port. `id_token_logprobs` takes the prompt ending at the open
/// slot (immediately after "Answer: " or "Incorrect Option: "); adapters
/// decide how the slot's trailing space maps onto their tokenization.
pub trait Backend: Send + Sync {
    /// Model/endpoint identifier; part of every cache digest.
    fn tag(&self) -> &str;

    /// Next-token log-probability of each label's designated token at the
    /// answer slot. Every requested label gets a finite value; labels the
    /// model omits are floor-substituted.
    fn id_token_logprobs(
        &self,
        prompt: &str,
        labels: &[OptionLabel],
    ) -> Result<BTreeMap<OptionLabel, f64>>;

    /// Total log-probability of `continuation` given `prefix`, summed over
    /// the continuation's tokens as segmented by the backend.
    fn continuation_logprob(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore>;

    /// Raw generated text; no extraction applied.
    fn generate(&self, prompt: &str, max_tokens: u32, temperature: f64) -> Result<String>;
}

/// The three request shapes, in the form that is canonically serialized
/// and digested for caching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendRequest {
    IdDistribution { prompt: String, candidates: Vec<OptionLabel> },
    Continuation { prefix: String, continuation: String },
    Generation { prompt: String, max_tokens: u32, temperature: f64 },
}

impl BackendRequest {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackendRequest::IdDistribution { candidates, .. } if candidates.is_empty() => {
                Err(Error::Precondition("id_distribution request with no candidates".into()))
            }
            BackendRequest::Continuation { continuation, .. } if continuation.is_empty() => {
                Err(Error::Precondition("empty continuation".into()))
            }
            BackendRequest::Generation { max_tokens: 0, .. } => {
                Err(Error::Precondition("generation requires max_tokens >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Cached responses, one per request kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendResponse {
    IdLogprobs { logprobs: BTreeMap<OptionLabel, f64> },
    Continuation { total_logprob: f64, token_count: usize },
    Generation { text: String },
}

/// Serializes a JSON value with object keys sorted recursively, so that
/// semantically equal requests digest identically regardless of field order.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn write(value: &serde_json::Value, out: &mut String) {
        match value {
            serde_json::Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, key) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(key).expect("string serializes"));
                    out.push(':');
                    write(&map[*key], out);
                }
                out.push('}');
            }
            serde_json::Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Lowercase hex SHA-256 of the canonical serialization of
/// `(backend_tag, request)`. Identical requests against the same backend
/// always produce the same digest.
pub fn request_digest(backend_tag: &str, request: &BackendRequest) -> String {
    let envelope = serde_json::json!({
        "backend_tag": backend_tag,
        "request": serde_json::to_value(request).expect("request serializes"),
    });
    let canonical = canonical_json(&envelope);
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}
