//! Option-ID prior estimation and the debiasing correction.
//!
//! The correction divides each raw ID probability by the label's estimated
//! prior. Priors are estimated label-free on a small held-out sample, by
//! default by scoring every cyclic rotation of each sample's option
//! contents against fixed labels and averaging the normalized
//! distributions, which cancels content and leaves the model's per-label
//! preference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Backend;
use crate::core::{DebiasedDistribution, IdDistribution, McqInstance, OptionLabel, OptionSpace};
use crate::error::{Error, Result};
use crate::prompt::{build_mcq_prompt, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorStrategy {
    CyclicPermutation,
    EmpiricalMean,
    Uniform,
}

impl std::str::FromStr for PriorStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic_permutation" | "cyclic" => Ok(PriorStrategy::CyclicPermutation),
            "empirical_mean" | "empirical" => Ok(PriorStrategy::EmpiricalMean),
            "uniform" => Ok(PriorStrategy::Uniform),
            other => Err(Error::Config(format!("unknown prior strategy {other:?}"))),
        }
    }
}

impl PriorStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PriorStrategy::CyclicPermutation => "cyclic_permutation",
            PriorStrategy::EmpiricalMean => "empirical_mean",
            PriorStrategy::Uniform => "uniform",
        }
    }
}

/// Estimated per-label prior for one (backend, dataset, option count).
/// Entries are strictly positive and sum to 1. Priors for different space
/// sizes are never interchanged; rescoring a reduced space goes through
/// [`Prior::slice`] or a per-size re-estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub strategy: String,
    pub space_size: usize,
    pub probs: BTreeMap<OptionLabel, f64>,
    pub sample_count: usize,
    pub estimation_uids: Vec<String>,
    pub backend_tag: String,
}

impl Prior {
    pub fn uniform(space_size: usize, backend_tag: &str) -> Result<Self> {
        if space_size == 0 {
            return Err(Error::Precondition("prior needs at least one label".into()));
        }
        let mut probs = BTreeMap::new();
        for i in 0..space_size {
            probs.insert(OptionLabel::new(i)?, 1.0 / space_size as f64);
        }
        Ok(Prior {
            strategy: PriorStrategy::Uniform.name().to_string(),
            space_size,
            probs,
            sample_count: 0,
            estimation_uids: Vec::new(),
            backend_tag: backend_tag.to_string(),
        })
    }

    fn from_probs(
        probs: BTreeMap<OptionLabel, f64>,
        strategy: PriorStrategy,
        sample_count: usize,
        estimation_uids: Vec<String>,
        backend_tag: &str,
    ) -> Result<Self> {
        let space_size = probs.len();
        let sum: f64 = probs.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("prior entries sum to {sum}, not 1")));
        }
        if probs.values().any(|p| *p <= 0.0) {
            return Err(Error::Precondition("prior entries must be strictly positive".into()));
        }
        Ok(Prior {
            strategy: strategy.name().to_string(),
            space_size,
            probs,
            sample_count,
            estimation_uids,
            backend_tag: backend_tag.to_string(),
        })
    }

    /// Short, stable identifier recorded in debiased distributions.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("prior serializes"));
        let digest = hex::encode(hasher.finalize());
        format!("{}-n{}-{}", self.strategy, self.space_size, &digest[..8])
    }

    /// Keeps the first `new_size` label entries and renormalizes. Used for
    /// rescoring reduced spaces when no separately estimated prior exists.
    pub fn slice(&self, new_size: usize) -> Result<Prior> {
        if new_size == 0 || new_size > self.space_size {
            return Err(Error::Precondition(format!(
                "cannot slice a {}-label prior to {new_size} labels",
                self.space_size
            )));
        }
        if new_size == self.space_size {
            return Ok(self.clone());
        }
        let kept: Vec<(OptionLabel, f64)> = self
            .probs
            .iter()
            .take(new_size)
            .map(|(l, p)| (*l, *p))
            .collect();
        let sum: f64 = kept.iter().map(|(_, p)| p).sum();
        let probs = kept.into_iter().map(|(l, p)| (l, p / sum)).collect();
        Ok(Prior {
            strategy: self.strategy.clone(),
            space_size: new_size,
            probs,
            sample_count: self.sample_count,
            estimation_uids: self.estimation_uids.clone(),
            backend_tag: self.backend_tag.clone(),
        })
    }
}

/// Divides each raw probability by the label's prior.
pub fn apply_debias(dist: &IdDistribution, prior: &Prior) -> Result<DebiasedDistribution> {
    let dist_labels: Vec<&OptionLabel> = dist.probs.keys().collect();
    let prior_labels: Vec<&OptionLabel> = prior.probs.keys().collect();
    if dist_labels != prior_labels {
        return Err(Error::PriorMismatch(format!(
            "distribution covers {} labels, prior covers {}",
            dist_labels.len(),
            prior_labels.len()
        )));
    }
    let scores = dist
        .probs
        .iter()
        .map(|(label, p)| (*label, p / prior.probs[label]))
        .collect();
    Ok(DebiasedDistribution { scores, prior_id: prior.id() })
}

/// Scores one sample's option contents rotated by `rotation` positions
/// against fixed labels, returning the candidate-normalized distribution.
fn score_rotation(
    sample: &McqInstance,
    rotation: usize,
    backend: &dyn Backend,
) -> Result<IdDistribution> {
    let n = sample.option_count();
    let rotated: Vec<String> = (0..n)
        .map(|i| sample.choices[(i + rotation) % n].text.clone())
        .collect();
    let instance = McqInstance::new(
        format!("{}#rot{rotation}", sample.uid),
        sample.question.clone(),
        rotated,
        0,
        sample.meta.clone(),
    )?;
    let space = OptionSpace::full(&instance);
    let prompt = build_mcq_prompt(&instance.question, &space, PromptKind::McqAnswer)?;
    let logprobs = backend.id_token_logprobs(&prompt, &space.labels())?;
    IdDistribution::from_logprobs(&logprobs, true)
}

/// Estimates the per-label prior from held-out samples, disjoint from the
/// evaluation set. All samples must have exactly `space_size` options.
pub fn estimate_prior(
    samples: &[McqInstance],
    backend: &dyn Backend,
    space_size: usize,
    strategy: PriorStrategy,
) -> Result<Prior> {
    if strategy == PriorStrategy::Uniform {
        return Prior::uniform(space_size, backend.tag());
    }
    if samples.is_empty() {
        return Err(Error::Precondition(format!(
            "{} prior estimation needs at least one sample",
            strategy.name()
        )));
    }
    for sample in samples {
        if sample.option_count() != space_size {
            return Err(Error::PriorMismatch(format!(
                "sample {} has {} options, expected {space_size}",
                sample.uid,
                sample.option_count()
            )));
        }
    }
    let rotations = match strategy {
        PriorStrategy::CyclicPermutation => space_size,
        PriorStrategy::EmpiricalMean => 1,
        PriorStrategy::Uniform => unreachable!(),
    };
    let mut sums: BTreeMap<OptionLabel, f64> = BTreeMap::new();
    for i in 0..space_size {
        sums.insert(OptionLabel::new(i)?, 0.0);
    }
    let mut scored = 0usize;
    for sample in samples {
        for rotation in 0..rotations {
            let dist = score_rotation(sample, rotation, backend)?;
            for (label, p) in &dist.probs {
                *sums.get_mut(label).expect("fixed label set") += p;
            }
            scored += 1;
        }
    }
    let probs = sums.into_iter().map(|(l, s)| (l, s / scored as f64)).collect();
    Prior::from_probs(
        probs,
        strategy,
        samples.len(),
        samples.iter().map(|s| s.uid.clone()).collect(),
        backend.tag(),
    )
}
