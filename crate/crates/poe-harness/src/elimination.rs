//! Option-ID process of elimination and its ablation variants.
//!
//! Two elimination strategies drive the harness: a threshold rule that
//! drops every option whose debiased ID log-score falls strictly below the
//! mean and then answers over the relabeled remainder, and a sequential
//! rule that repeatedly removes the debiased argmin until one option is
//! left. The ablations swap removal for [MASK] replacement, swap the
//! debiased ID metric for raw option scoring, or invert the prompt to ask
//! for the incorrect option.
//!
//! All rules are strict on "below" so the maximum is never eliminated, and
//! every run leaves a replayable trace of rounds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::core::{
    argmax_label, DebiasedDistribution, EliminationTrace, McqInstance, OptionLabel, OptionSpace,
    Round,
};
use crate::debias::{apply_debias, Prior};
use crate::error::{Error, Result};
use crate::methods::{aolp_scores, argmax_original, scores_by_original, Method, MethodResult, ScoringContext};
use crate::prompt::PromptKind;

/// How priors for reduced spaces are obtained during multi-round runs.
#[derive(Debug, Clone, Default)]
pub enum ReducedPriors {
    /// Slice-and-renormalize the full-size prior (cheap, the default).
    #[default]
    Slice,
    /// Separately estimated priors keyed by option count; sizes not present
    /// fall back to slicing.
    PerSize(BTreeMap<usize, Prior>),
}

impl ReducedPriors {
    fn resolve(&self, full: &Prior, size: usize) -> Result<Prior> {
        if let ReducedPriors::PerSize(by_size) = self {
            if let Some(prior) = by_size.get(&size) {
                if prior.space_size != size {
                    return Err(Error::PriorMismatch(format!(
                        "per-size prior for {size} actually covers {}",
                        prior.space_size
                    )));
                }
                return Ok(prior.clone());
            }
        }
        full.slice(size)
    }
}

/// One mean-of-logs threshold decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRound {
    pub log_scores: BTreeMap<OptionLabel, f64>,
    pub mean_log: f64,
    /// Labels strictly below the mean; never includes the maximum.
    pub below: BTreeSet<OptionLabel>,
}

impl ThresholdRound {
    pub fn from_debiased(debiased: &DebiasedDistribution) -> Self {
        let log_scores: BTreeMap<OptionLabel, f64> =
            debiased.scores.iter().map(|(l, s)| (*l, s.ln())).collect();
        let mean_log = log_scores.values().sum::<f64>() / log_scores.len() as f64;
        let below = log_scores
            .iter()
            .filter(|(_, l)| **l < mean_log)
            .map(|(label, _)| *label)
            .collect();
        ThresholdRound { log_scores, mean_log, below }
    }

    /// Labels at or above the mean (the "incorrect" flag set of the
    /// explicit-elimination variant).
    pub fn at_or_above(&self) -> BTreeSet<OptionLabel> {
        self.log_scores
            .keys()
            .filter(|l| !self.below.contains(l))
            .copied()
            .collect()
    }
}

/// Old label -> new label for entries surviving from `before` to `after`.
fn relabel_map(before: &OptionSpace, after: &OptionSpace) -> BTreeMap<OptionLabel, OptionLabel> {
    after
        .entries()
        .map(|(new_label, choice)| {
            let old = before
                .label_of(choice.original_index)
                .expect("survivor was present before relabeling");
            (old, new_label)
        })
        .collect()
}

fn check_prior(instance: &McqInstance, prior: &Prior) -> Result<()> {
    if prior.space_size != instance.option_count() {
        return Err(Error::PriorMismatch(format!(
            "instance {} has {} options but prior covers {}",
            instance.uid,
            instance.option_count(),
            prior.space_size
        )));
    }
    Ok(())
}

fn debiased_ids(
    instance: &McqInstance,
    space: &OptionSpace,
    slot: PromptKind,
    ctx: &ScoringContext,
    prior: &Prior,
) -> Result<DebiasedDistribution> {
    let dist = ctx.id_distribution(instance, space, slot)?;
    apply_debias(&dist, prior)
}

fn result_with_trace(
    method: Method,
    answer: usize,
    scores: BTreeMap<usize, f64>,
    rounds: Vec<Round>,
    fallback: Option<String>,
) -> MethodResult {
    MethodResult {
        method,
        predicted_original_index: Some(answer),
        option_scores: scores,
        trace: Some(EliminationTrace {
            method: method.id().to_string(),
            rounds,
            final_answer: answer,
            fallback,
        }),
        raw_generation: None,
    }
}

/// Threshold elimination: drop options whose debiased ID log-score is
/// strictly below the mean, then answer by debiased argmax over the
/// relabeled remainder. When nothing falls below the mean the round-one
/// argmax already is the answer and no rescoring call is made.
pub fn poe_log(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
    reduced_priors: &ReducedPriors,
) -> Result<MethodResult> {
    check_prior(instance, prior)?;
    let space = OptionSpace::full(instance);
    let debiased = debiased_ids(instance, &space, PromptKind::McqAnswer, ctx, prior)?;
    let threshold = ThresholdRound::from_debiased(&debiased);
    let eliminated: BTreeSet<usize> = threshold
        .below
        .iter()
        .map(|l| space.original_of(*l).expect("label in space"))
        .collect();
    let mut scores = scores_by_original(&space, &debiased.scores);

    if eliminated.is_empty() {
        let answer = space.original_of(debiased.argmax()).expect("argmax label in space");
        let rounds = vec![Round {
            threshold: Some(threshold.mean_log),
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: debiased,
        }];
        return Ok(result_with_trace(Method::PoeLog, answer, scores, rounds, None));
    }

    let survivors = space.relabel_after_elimination(&eliminated)?;
    let mut rounds = vec![Round {
        threshold: Some(threshold.mean_log),
        eliminated_original_indices: eliminated,
        masked_original_indices: BTreeSet::new(),
        relabel_map: relabel_map(&space, &survivors),
        distribution_snapshot: debiased,
    }];

    let answer = if survivors.size() == 1 {
        survivors.entries().next().expect("one survivor").1.original_index
    } else {
        let reduced_prior = reduced_priors.resolve(prior, survivors.size())?;
        let rescored =
            debiased_ids(instance, &survivors, PromptKind::McqAnswer, ctx, &reduced_prior)?;
        let answer = survivors
            .original_of(rescored.argmax())
            .expect("argmax label in reduced space");
        for (idx, score) in scores_by_original(&survivors, &rescored.scores) {
            scores.insert(idx, score);
        }
        rounds.push(Round {
            threshold: None,
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: rescored,
        });
        answer
    };
    Ok(result_with_trace(Method::PoeLog, answer, scores, rounds, None))
}

/// Sequential elimination: remove the debiased argmin, relabel, rescore;
/// exactly N-1 rounds for N options. Ties eliminate the lowest original index.
pub fn poe_seq(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
    reduced_priors: &ReducedPriors,
) -> Result<MethodResult> {
    check_prior(instance, prior)?;
    let mut space = OptionSpace::full(instance);
    let mut rounds = Vec::new();
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    while space.size() > 1 {
        let round_prior = reduced_priors.resolve(prior, space.size())?;
        let debiased = debiased_ids(instance, &space, PromptKind::McqAnswer, ctx, &round_prior)?;
        for (idx, score) in scores_by_original(&space, &debiased.scores) {
            scores.insert(idx, score);
        }
        let victim = space
            .original_of(debiased.argmin())
            .expect("argmin label in space");
        let removal: BTreeSet<usize> = [victim].into_iter().collect();
        let survivors = space.relabel_after_elimination(&removal)?;
        rounds.push(Round {
            threshold: None,
            eliminated_original_indices: removal,
            masked_original_indices: BTreeSet::new(),
            relabel_map: relabel_map(&space, &survivors),
            distribution_snapshot: debiased,
        });
        space = survivors;
    }
    let answer = space.entries().next().expect("one survivor").1.original_index;
    Ok(result_with_trace(Method::PoeSeq, answer, scores, rounds, None))
}

/// Raw-score implicit elimination: options scoring strictly below the mean
/// of log P(option | question, block) are replaced with [MASK] in the
/// block, the rest are rescored, and masked options are forced to -inf.
pub fn ie_original(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let space = OptionSpace::full(instance);
    let first = aolp_scores(instance, &space, ctx)?;
    let mean = first.values().sum::<f64>() / first.len() as f64;
    let masked: BTreeSet<usize> =
        first.iter().filter(|(_, s)| **s < mean).map(|(idx, _)| *idx).collect();

    let snapshot = DebiasedDistribution {
        scores: first
            .iter()
            .map(|(idx, s)| (space.label_of(*idx).expect("index in space"), *s))
            .collect(),
        prior_id: "none".to_string(),
    };

    if masked.is_empty() {
        let answer = argmax_original(&first);
        let rounds = vec![Round {
            threshold: Some(mean),
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: snapshot,
        }];
        return Ok(result_with_trace(Method::Ie, answer, first, rounds, None));
    }

    let masked_space = space.with_masked(&masked)?;
    let rescored = aolp_scores(instance, &masked_space, ctx)?;
    let answer = argmax_original(&rescored);
    let mut final_scores = rescored.clone();
    for idx in &masked {
        final_scores.insert(*idx, f64::NEG_INFINITY);
    }
    let rounds = vec![
        Round {
            threshold: Some(mean),
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: masked,
            relabel_map: BTreeMap::new(),
            distribution_snapshot: snapshot,
        },
        Round {
            threshold: None,
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: DebiasedDistribution {
                scores: rescored
                    .iter()
                    .map(|(idx, s)| (masked_space.label_of(*idx).expect("index in space"), *s))
                    .collect(),
                prior_id: "none".to_string(),
            },
        },
    ];
    Ok(result_with_trace(Method::Ie, answer, final_scores, rounds, None))
}

/// The threshold criterion of `poe_log` with [MASK] replacement instead of
/// removal: labels stay fixed, masked labels are excluded from the final
/// debiased argmax.
pub fn ie_new(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
) -> Result<MethodResult> {
    check_prior(instance, prior)?;
    let space = OptionSpace::full(instance);
    let debiased = debiased_ids(instance, &space, PromptKind::McqAnswer, ctx, prior)?;
    let threshold = ThresholdRound::from_debiased(&debiased);
    let masked: BTreeSet<usize> = threshold
        .below
        .iter()
        .map(|l| space.original_of(*l).expect("label in space"))
        .collect();
    let mut scores = scores_by_original(&space, &debiased.scores);

    if masked.is_empty() {
        let answer = space.original_of(debiased.argmax()).expect("argmax label in space");
        let rounds = vec![Round {
            threshold: Some(threshold.mean_log),
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: debiased,
        }];
        return Ok(result_with_trace(Method::IeNew, answer, scores, rounds, None));
    }

    let masked_space = space.with_masked(&masked)?;
    let rescored = debiased_ids(instance, &masked_space, PromptKind::McqAnswer, ctx, prior)?;
    let live: BTreeMap<OptionLabel, f64> = rescored
        .scores
        .iter()
        .filter(|(label, _)| {
            let idx = masked_space.original_of(**label).expect("label in space");
            !masked_space.is_masked(idx)
        })
        .map(|(l, s)| (*l, *s))
        .collect();
    let answer = masked_space
        .original_of(argmax_label(&live))
        .expect("argmax label in space");
    for (idx, score) in scores_by_original(&masked_space, &live) {
        scores.insert(idx, score);
    }
    let rounds = vec![
        Round {
            threshold: Some(threshold.mean_log),
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: masked,
            relabel_map: BTreeMap::new(),
            distribution_snapshot: debiased,
        },
        Round {
            threshold: None,
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: rescored,
        },
    ];
    Ok(result_with_trace(Method::IeNew, answer, scores, rounds, None))
}

/// Sequential [MASK] replacement: mask the debiased argmin among unmasked
/// labels for N-1 rounds; labels never relabel. The last unmasked option
/// answers.
pub fn mask_seq(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
) -> Result<MethodResult> {
    check_prior(instance, prior)?;
    let mut space = OptionSpace::full(instance);
    let mut rounds = Vec::new();
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    while space.unmasked_labels().len() > 1 {
        let debiased = debiased_ids(instance, &space, PromptKind::McqAnswer, ctx, prior)?;
        let live: BTreeMap<OptionLabel, f64> = space
            .unmasked_labels()
            .into_iter()
            .map(|l| (l, debiased.scores[&l]))
            .collect();
        for (idx, score) in scores_by_original(&space, &live) {
            scores.insert(idx, score);
        }
        let victim_label = crate::core::argmin_label(&live);
        let victim = space.original_of(victim_label).expect("label in space");
        let addition: BTreeSet<usize> = [victim].into_iter().collect();
        space = space.with_masked(&addition)?;
        rounds.push(Round {
            threshold: None,
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: addition,
            relabel_map: BTreeMap::new(),
            distribution_snapshot: debiased,
        });
    }
    let answer = space
        .entries()
        .find(|(_, c)| !space.is_masked(c.original_index))
        .expect("one unmasked survivor")
        .1
        .original_index;
    Ok(result_with_trace(Method::MaskSeq, answer, scores, rounds, None))
}

/// Explicit elimination, threshold form: under the incorrect-option prompt,
/// labels whose debiased log-score is at or above the mean are flagged
/// incorrect and removed; survivors are answered with the standard prompt.
/// When every label is flagged the answer falls back to full-space debiased
/// argmax under the standard prompt, recorded in the trace.
pub fn ee_new_log(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
    reduced_priors: &ReducedPriors,
) -> Result<MethodResult> {
    check_prior(instance, prior)?;
    let space = OptionSpace::full(instance);
    let incorrect = debiased_ids(instance, &space, PromptKind::McqIncorrect, ctx, prior)?;
    let threshold = ThresholdRound::from_debiased(&incorrect);
    let flagged: BTreeSet<usize> = threshold
        .at_or_above()
        .iter()
        .map(|l| space.original_of(*l).expect("label in space"))
        .collect();
    let mut scores = scores_by_original(&space, &incorrect.scores);

    if flagged.len() == space.size() {
        let answered = debiased_ids(instance, &space, PromptKind::McqAnswer, ctx, prior)?;
        let answer = space.original_of(answered.argmax()).expect("argmax label in space");
        scores = scores_by_original(&space, &answered.scores);
        let rounds = vec![
            Round {
                threshold: Some(threshold.mean_log),
                eliminated_original_indices: BTreeSet::new(),
                masked_original_indices: BTreeSet::new(),
                relabel_map: BTreeMap::new(),
                distribution_snapshot: incorrect,
            },
            Round {
                threshold: None,
                eliminated_original_indices: BTreeSet::new(),
                masked_original_indices: BTreeSet::new(),
                relabel_map: BTreeMap::new(),
                distribution_snapshot: answered,
            },
        ];
        return Ok(result_with_trace(
            Method::EeNewLog,
            answer,
            scores,
            rounds,
            Some("all labels flagged incorrect; answered with full-space debiased argmax".into()),
        ));
    }

    let survivors = space.relabel_after_elimination(&flagged)?;
    let mut rounds = vec![Round {
        threshold: Some(threshold.mean_log),
        eliminated_original_indices: flagged,
        masked_original_indices: BTreeSet::new(),
        relabel_map: relabel_map(&space, &survivors),
        distribution_snapshot: incorrect,
    }];
    let answer = if survivors.size() == 1 {
        survivors.entries().next().expect("one survivor").1.original_index
    } else {
        let reduced_prior = reduced_priors.resolve(prior, survivors.size())?;
        let answered =
            debiased_ids(instance, &survivors, PromptKind::McqAnswer, ctx, &reduced_prior)?;
        let answer = survivors
            .original_of(answered.argmax())
            .expect("argmax label in reduced space");
        for (idx, score) in scores_by_original(&survivors, &answered.scores) {
            scores.insert(idx, score);
        }
        rounds.push(Round {
            threshold: None,
            eliminated_original_indices: BTreeSet::new(),
            masked_original_indices: BTreeSet::new(),
            relabel_map: BTreeMap::new(),
            distribution_snapshot: answered,
        });
        answer
    };
    Ok(result_with_trace(Method::EeNewLog, answer, scores, rounds, None))
}

/// Explicit elimination, sequential form: repeatedly remove the debiased
/// argmax under the incorrect-option prompt (the most-incorrect option)
/// until one option survives. Ties remove the lowest original index.
pub fn ee_new_seq(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
    reduced_priors: &ReducedPriors,
) -> Result<MethodResult> {
    check_prior(instance, prior)?;
    let mut space = OptionSpace::full(instance);
    let mut rounds = Vec::new();
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    while space.size() > 1 {
        let round_prior = reduced_priors.resolve(prior, space.size())?;
        let debiased =
            debiased_ids(instance, &space, PromptKind::McqIncorrect, ctx, &round_prior)?;
        for (idx, score) in scores_by_original(&space, &debiased.scores) {
            scores.insert(idx, score);
        }
        let victim = space
            .original_of(debiased.argmax())
            .expect("argmax label in space");
        let removal: BTreeSet<usize> = [victim].into_iter().collect();
        let survivors = space.relabel_after_elimination(&removal)?;
        rounds.push(Round {
            threshold: None,
            eliminated_original_indices: removal,
            masked_original_indices: BTreeSet::new(),
            relabel_map: relabel_map(&space, &survivors),
            distribution_snapshot: debiased,
        });
        space = survivors;
    }
    let answer = space.entries().next().expect("one survivor").1.original_index;
    Ok(result_with_trace(Method::EeNewSeq, answer, scores, rounds, None))
}

/// Change in the gold option's candidate-normalized debiased probability
/// from the full space to the surviving space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceShift {
    pub increased: bool,
    pub delta: f64,
}

/// Compares the gold label's normalized debiased probability before
/// elimination (over the full label set) and after (over the survivors).
/// Errors when the gold option did not survive; callers route that case to
/// scenario-1 accounting.
pub fn confidence_shift(
    before: &DebiasedDistribution,
    before_space: &OptionSpace,
    after: &DebiasedDistribution,
    after_space: &OptionSpace,
    gold_original_index: usize,
) -> Result<ConfidenceShift> {
    let after_label = after_space
        .label_of(gold_original_index)
        .ok_or(Error::GoldEliminated)?;
    let before_label = before_space
        .label_of(gold_original_index)
        .ok_or(Error::GoldEliminated)?;
    let before_value = before
        .normalized(before_label)
        .ok_or_else(|| Error::Precondition("gold label missing from before-distribution".into()))?;
    let after_value = after
        .normalized(after_label)
        .ok_or_else(|| Error::Precondition("gold label missing from after-distribution".into()))?;
    let delta = after_value - before_value;
    Ok(ConfidenceShift { increased: after_value > before_value, delta })
}
