//! Deterministic synthetic model for tests, demos, and offline runs.
//!
//! The backend parses the choice block out of each prompt and serves
//! probabilities from one of two constructions:
//!
//! - per-text signal times a positional label bias (`context_sensitive:
//!   false`), the construction used for debias-recovery experiments;
//! - a keyed PRF over the full visible option block (`context_sensitive:
//!   true`), so every distinct (slot, visible texts) context gets its own
//!   reproducible random scores.
//!
//! Both constructions are pure functions of the configuration, so replays
//! and parallel runs are deterministic. Option texts are assumed to be
//! single-line (true for every loader in this crate).

use std::collections::BTreeMap;
use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::core::OptionLabel;
use crate::error::{Error, Result};
use crate::prompt::MASK_STRING;

use super::{Backend, ContinuationScore};

/// Which open slot a parsed prompt ends in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotKind {
    Answer,
    Incorrect,
    /// Prompt without a choice block; carries the raw prefix text.
    Raw(String),
}

impl SlotKind {
    fn domain_tag(&self) -> &str {
        match self {
            SlotKind::Answer => "answer",
            SlotKind::Incorrect => "incorrect",
            SlotKind::Raw(_) => "raw",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub tag: String,
    pub seed: u64,
    /// Positional multiplier applied to ID probabilities; positions beyond
    /// the vector get 1.0. Empty means no injected bias.
    pub bias: Vec<f64>,
    /// Candidate-normalize ID probabilities over the block's labels.
    pub normalize: bool,
    /// Score from the full visible context instead of per-text signals.
    pub context_sensitive: bool,
    /// Explicit per-text signals; texts not listed fall back to
    /// `default_signal`, or to a PRF of the text when that is unset.
    pub signal: HashMap<String, f64>,
    pub default_signal: Option<f64>,
    /// Added to every returned ID log-probability, scaling the raw ID
    /// probabilities by a constant factor. Continuation scores are not
    /// shifted; they must stay non-positive.
    pub logprob_shift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            tag: "synthetic".to_string(),
            seed: 0,
            bias: Vec::new(),
            normalize: false,
            context_sensitive: false,
            signal: HashMap::new(),
            default_signal: None,
            logprob_shift: 0.0,
        }
    }
}

pub struct SyntheticBackend {
    config: SyntheticConfig,
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Self {
        SyntheticBackend { config }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// PRF in (0, 1), keyed by seed and arbitrary domain parts.
    fn prf(&self, parts: &[&str]) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        for part in parts {
            hasher.update([0x1f]);
            hasher.update(part.as_bytes());
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let x = u64::from_le_bytes(bytes) >> 11;
        (x as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn signal_of(&self, text: &str) -> f64 {
        if let Some(v) = self.config.signal.get(text) {
            return *v;
        }
        if let Some(v) = self.config.default_signal {
            return v;
        }
        self.prf(&["signal", text])
    }

    fn bias_at(&self, position: usize) -> f64 {
        self.config.bias.get(position).copied().unwrap_or(1.0)
    }

    /// ID probabilities for a visible option block, after bias, optional
    /// normalization, and the configured shift. This is the same model the
    /// prompt path serves, exposed directly so independent oracles can
    /// consume it without going through prompt construction.
    pub fn id_probabilities(&self, slot: &SlotKind, visible: &[&str]) -> Vec<f64> {
        let context = visible.join("\u{1f}");
        let mut probs: Vec<f64> = (0..visible.len())
            .map(|position| {
                let base = if self.config.context_sensitive {
                    let pos = position.to_string();
                    self.prf(&["id", slot.domain_tag(), &context, &pos])
                } else {
                    self.signal_of(visible[position])
                };
                base * self.bias_at(position)
            })
            .collect();
        if self.config.normalize {
            let sum: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= sum;
            }
        }
        let scale = self.config.logprob_shift.exp();
        for p in &mut probs {
            *p *= scale;
        }
        probs
    }

    /// Continuation probability of `text` in a visible context.
    pub fn continuation_probability(&self, slot: &SlotKind, visible: &[&str], text: &str) -> f64 {
        if self.config.context_sensitive {
            let context = visible.join("\u{1f}");
            match slot {
                SlotKind::Raw(prefix) => self.prf(&["cont-raw", prefix, text]),
                _ => self.prf(&["cont", slot.domain_tag(), &context, text]),
            }
        } else {
            self.signal_of(text)
        }
    }

    /// Deterministic token count in 1..=4 for a scored continuation.
    pub fn continuation_tokens(&self, text: &str) -> usize {
        1 + (self.prf(&["tokens", text]) * 4.0) as usize
    }

    /// Splits a prompt into its trailing visible option block and slot.
    /// Few-shot prompts parse to their final (target) block.
    pub fn parse_prompt(prompt: &str) -> (SlotKind, Vec<String>) {
        let Some(pos) = prompt.rfind("Choices:\n") else {
            return (SlotKind::Raw(prompt.to_string()), Vec::new());
        };
        let tail = &prompt[pos + "Choices:\n".len()..];
        let mut visible = Vec::new();
        let mut slot = SlotKind::Answer;
        for line in tail.lines() {
            if line.starts_with("Incorrect Option:") {
                slot = SlotKind::Incorrect;
                break;
            }
            if line.starts_with("Answer:") {
                slot = SlotKind::Answer;
                break;
            }
            if let Some((label, text)) = line.split_once(". ") {
                if label.len() == 1 {
                    visible.push(text.to_string());
                }
            }
        }
        (slot, visible)
    }
}

impl Backend for SyntheticBackend {
    fn tag(&self) -> &str {
        &self.config.tag
    }

    fn id_token_logprobs(
        &self,
        prompt: &str,
        labels: &[OptionLabel],
    ) -> Result<BTreeMap<OptionLabel, f64>> {
        if labels.is_empty() {
            return Err(Error::Precondition("no candidate labels".into()));
        }
        let (slot, visible) = Self::parse_prompt(prompt);
        if visible.is_empty() {
            return Err(Error::Decode(format!(
                "synthetic backend could not parse a choice block from prompt {prompt:?}"
            )));
        }
        let refs: Vec<&str> = visible.iter().map(|s| s.as_str()).collect();
        let probs = self.id_probabilities(&slot, &refs);
        let mut out = BTreeMap::new();
        for label in labels {
            let p = probs.get(label.index()).ok_or_else(|| {
                Error::Decode(format!(
                    "label {label} outside the parsed block of {} options",
                    probs.len()
                ))
            })?;
            out.insert(*label, p.ln());
        }
        Ok(out)
    }

    fn continuation_logprob(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore> {
        if continuation.is_empty() {
            return Err(Error::Precondition("empty continuation".into()));
        }
        let (slot, visible) = Self::parse_prompt(prefix);
        let refs: Vec<&str> = visible.iter().map(|s| s.as_str()).collect();
        let text = continuation.strip_prefix(' ').unwrap_or(continuation);
        let p = self.continuation_probability(&slot, &refs, text);
        ContinuationScore::new(p.ln().min(0.0), self.continuation_tokens(text))
    }

    fn generate(&self, prompt: &str, _max_tokens: u32, _temperature: f64) -> Result<String> {
        let (slot, visible) = Self::parse_prompt(prompt);
        if visible.is_empty() {
            return Ok("A".to_string());
        }
        let refs: Vec<&str> = visible.iter().map(|s| s.as_str()).collect();
        let probs = self.id_probabilities(&slot, &refs);
        let mut best = 0usize;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Ok(((b'A' + best as u8) as char).to_string())
    }
}

/// Visible texts of a space in entry order, masked entries replaced.
pub fn visible_texts(space: &crate::core::OptionSpace) -> Vec<String> {
    space
        .entries()
        .map(|(_, c)| {
            if space.is_masked(c.original_index) {
                MASK_STRING.to_string()
            } else {
                c.text.clone()
            }
        })
        .collect()
}
