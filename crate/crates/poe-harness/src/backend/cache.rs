//! Content-addressed replay cache over any backend.
//!
//! The cache file is append-only JSONL, one entry per line. Reads hit an
//! immutable snapshot loaded at open plus an overlay of entries written
//! during this run; writes are serialized through a single writer. Entries
//! are matched by request digest, never by arrival order, so a warm cache
//! makes any backend observationally deterministic.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::core::OptionLabel;
use crate::error::{Error, Result};

use super::{request_digest, Backend, BackendRequest, BackendResponse, ContinuationScore};

/// One cached response, as persisted on its own JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub backend_tag: String,
    pub request: BackendRequest,
    pub response: BackendResponse,
}

struct WriteSide {
    overlay: HashMap<String, BackendResponse>,
    writer: BufWriter<File>,
}

/// Cache-first wrapper. Misses delegate to the inner backend and persist;
/// in replay-only mode a miss is an error instead.
pub struct ReplayBackend {
    tag: String,
    inner: Option<Arc<dyn Backend>>,
    snapshot: HashMap<String, BackendResponse>,
    write_side: Mutex<WriteSide>,
    requests: AtomicU64,
    delegated: AtomicU64,
}

impl ReplayBackend {
    /// Wraps a live backend; the cache absorbs all repeated requests.
    pub fn wrap(cache_path: &Path, inner: Arc<dyn Backend>) -> Result<Self> {
        let tag = inner.tag().to_string();
        Self::open(cache_path, Some(inner), tag)
    }

    /// Serves exclusively from the cache; any miss is an error. `tag` must
    /// match the tag the cache was recorded under.
    pub fn replay_only(cache_path: &Path, tag: &str) -> Result<Self> {
        Self::open(cache_path, None, tag.to_string())
    }

    fn open(cache_path: &Path, inner: Option<Arc<dyn Backend>>, tag: String) -> Result<Self> {
        let snapshot = if cache_path.exists() {
            load_entries(cache_path)?
                .into_iter()
                .map(|e| (e.request_digest, e.response))
                .collect()
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(cache_path)?;
        Ok(ReplayBackend {
            tag,
            inner,
            snapshot,
            write_side: Mutex::new(WriteSide {
                overlay: HashMap::new(),
                writer: BufWriter::new(file),
            }),
            requests: AtomicU64::new(0),
            delegated: AtomicU64::new(0),
        })
    }

    /// Entries visible to this handle (snapshot plus this run's writes).
    pub fn entry_count(&self) -> usize {
        let overlay = &self.write_side.lock().unwrap().overlay;
        let new = overlay.keys().filter(|k| !self.snapshot.contains_key(*k)).count();
        self.snapshot.len() + new
    }

    /// Number of requests that reached the inner backend.
    pub fn delegated_calls(&self) -> u64 {
        self.delegated.load(Ordering::SeqCst)
    }

    /// Total requests served through this wrapper.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    fn lookup(&self, digest: &str) -> Option<BackendResponse> {
        if let Some(hit) = self.snapshot.get(digest) {
            return Some(hit.clone());
        }
        self.write_side.lock().unwrap().overlay.get(digest).cloned()
    }

    fn serve(&self, request: BackendRequest) -> Result<BackendResponse> {
        request.validate()?;
        self.requests.fetch_add(1, Ordering::SeqCst);
        let digest = request_digest(&self.tag, &request);
        if let Some(hit) = self.lookup(&digest) {
            return Ok(hit);
        }
        let inner = self
            .inner
            .as_ref()
            .ok_or_else(|| Error::ReplayMiss { digest: digest.clone() })?;
        self.delegated.fetch_add(1, Ordering::SeqCst);
        let response = match &request {
            BackendRequest::IdDistribution { prompt, candidates } => BackendResponse::IdLogprobs {
                logprobs: inner.id_token_logprobs(prompt, candidates)?,
            },
            BackendRequest::Continuation { prefix, continuation } => {
                let score = inner.continuation_logprob(prefix, continuation)?;
                BackendResponse::Continuation {
                    total_logprob: score.total_logprob,
                    token_count: score.token_count,
                }
            }
            BackendRequest::Generation { prompt, max_tokens, temperature } => {
                BackendResponse::Generation {
                    text: inner.generate(prompt, *max_tokens, *temperature)?,
                }
            }
        };
        let mut side = self.write_side.lock().unwrap();
        // A concurrent miss on the same digest may have landed first; keep
        // one line per digest.
        if !side.overlay.contains_key(&digest) && !self.snapshot.contains_key(&digest) {
            let entry = CacheEntry {
                request_digest: digest.clone(),
                backend_tag: self.tag.clone(),
                request,
                response: response.clone(),
            };
            let line = serde_json::to_string(&entry)?;
            side.writer.write_all(line.as_bytes())?;
            side.writer.write_all(b"\n")?;
            side.writer.flush()?;
            side.overlay.insert(digest, response.clone());
        }
        Ok(response)
    }
}

impl Backend for ReplayBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn id_token_logprobs(
        &self,
        prompt: &str,
        labels: &[OptionLabel],
    ) -> Result<BTreeMap<OptionLabel, f64>> {
        let request = BackendRequest::IdDistribution {
            prompt: prompt.to_string(),
            candidates: labels.to_vec(),
        };
        match self.serve(request)? {
            BackendResponse::IdLogprobs { logprobs } => Ok(logprobs),
            other => Err(Error::Decode(format!("cache returned wrong response kind: {other:?}"))),
        }
    }

    fn continuation_logprob(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore> {
        let request = BackendRequest::Continuation {
            prefix: prefix.to_string(),
            continuation: continuation.to_string(),
        };
        match self.serve(request)? {
            BackendResponse::Continuation { total_logprob, token_count } => {
                ContinuationScore::new(total_logprob, token_count)
            }
            other => Err(Error::Decode(format!("cache returned wrong response kind: {other:?}"))),
        }
    }

    fn generate(&self, prompt: &str, max_tokens: u32, temperature: f64) -> Result<String> {
        let request = BackendRequest::Generation {
            prompt: prompt.to_string(),
            max_tokens,
            temperature,
        };
        match self.serve(request)? {
            BackendResponse::Generation { text } => Ok(text),
            other => Err(Error::Decode(format!("cache returned wrong response kind: {other:?}"))),
        }
    }
}

/// Reads every parseable entry; corrupt lines are skipped with a warning,
/// never silently misread. Later lines win on digest collisions.
pub fn load_entries(path: &Path) -> Result<Vec<CacheEntry>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut by_digest: BTreeMap<String, CacheEntry> = BTreeMap::new();
    for (number, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CacheEntry>(&line) {
            Ok(entry) => {
                by_digest.insert(entry.request_digest.clone(), entry);
            }
            Err(err) => {
                warn!(line = number + 1, %err, "skipping corrupt cache line");
            }
        }
    }
    Ok(by_digest.into_values().collect())
}
