//! Scripted backend for tests: explicit lookup tables keyed by the exact
//! prompt or (prefix, continuation) pair, with call counting.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::core::OptionLabel;
use crate::error::{Error, Result};

use super::{Backend, ContinuationScore};

#[derive(Default)]
pub struct MockBackend {
    tag: String,
    id_tables: Mutex<HashMap<String, BTreeMap<char, f64>>>,
    continuation_tables: Mutex<HashMap<(String, String), Vec<f64>>>,
    generations: Mutex<HashMap<String, String>>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(tag: impl Into<String>) -> Self {
        MockBackend { tag: tag.into(), ..Default::default() }
    }

    /// Scripts the ID log-probabilities returned for an exact prompt.
    pub fn script_ids(&self, prompt: &str, logprobs: &[(char, f64)]) {
        self.id_tables
            .lock()
            .unwrap()
            .insert(prompt.to_string(), logprobs.iter().copied().collect());
    }

    /// Scripts per-token log-probabilities for an exact (prefix, continuation) pair.
    pub fn script_continuation(&self, prefix: &str, continuation: &str, per_token: &[f64]) {
        self.continuation_tables
            .lock()
            .unwrap()
            .insert((prefix.to_string(), continuation.to_string()), per_token.to_vec());
    }

    pub fn script_generation(&self, prompt: &str, text: &str) {
        self.generations.lock().unwrap().insert(prompt.to_string(), text.to_string());
    }

    /// Total number of backend calls served, across all three operations.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn id_token_logprobs(
        &self,
        prompt: &str,
        labels: &[OptionLabel],
    ) -> Result<BTreeMap<OptionLabel, f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let tables = self.id_tables.lock().unwrap();
        let table = tables.get(prompt).ok_or_else(|| {
            Error::Decode(format!("mock has no ID table for prompt {prompt:?}"))
        })?;
        let mut out = BTreeMap::new();
        for label in labels {
            let lp = table.get(&label.letter()).ok_or_else(|| {
                Error::Decode(format!("mock ID table missing label {label}"))
            })?;
            out.insert(*label, *lp);
        }
        Ok(out)
    }

    fn continuation_logprob(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore> {
        if continuation.is_empty() {
            return Err(Error::Precondition("empty continuation".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let tables = self.continuation_tables.lock().unwrap();
        let per_token = tables
            .get(&(prefix.to_string(), continuation.to_string()))
            .ok_or_else(|| {
                Error::Decode(format!(
                    "mock has no continuation table for prefix {prefix:?} continuation {continuation:?}"
                ))
            })?;
        ContinuationScore::new(per_token.iter().sum(), per_token.len())
    }

    fn generate(&self, prompt: &str, _max_tokens: u32, _temperature: f64) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.generations
            .lock()
            .unwrap()
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Decode(format!("mock has no generation for prompt {prompt:?}")))
    }
}
