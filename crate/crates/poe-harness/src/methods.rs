//! The baseline answering methods: option scoring (LM, AVG, PMI_DC,
//! Channel, AOLP), option-ID scoring (MCP, D-MCP), and text generation (TG).
//!
//! Every method maps an instance to a prediction with per-option scores
//! keyed by original index. Ties always break to the lowest original index.
//! Methods are pure given a backend, so instances may be evaluated
//! concurrently under the backend's parallelism bound.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::core::{EliminationTrace, IdDistribution, McqInstance, OptionSpace};
use crate::debias::{apply_debias, Prior};
use crate::error::{Error, Result};
use crate::prompt::{
    build_channel_prefix, build_domain_prompt, build_fewshot, build_question_only,
    continuation_parts, PromptKind, Shot,
};

/// Stable method identifiers used in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lm,
    Avg,
    PmiDc,
    Channel,
    Aolp,
    Mcp,
    Dmcp,
    Tg,
    PoeLog,
    PoeSeq,
    Ie,
    IeNew,
    MaskSeq,
    EeNewLog,
    EeNewSeq,
}

impl Method {
    pub const ALL: [Method; 15] = [
        Method::Lm,
        Method::Avg,
        Method::PmiDc,
        Method::Channel,
        Method::Aolp,
        Method::Mcp,
        Method::Dmcp,
        Method::Tg,
        Method::PoeLog,
        Method::PoeSeq,
        Method::Ie,
        Method::IeNew,
        Method::MaskSeq,
        Method::EeNewLog,
        Method::EeNewSeq,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Method::Lm => "lm",
            Method::Avg => "avg",
            Method::PmiDc => "pmi_dc",
            Method::Channel => "channel",
            Method::Aolp => "aolp",
            Method::Mcp => "mcp",
            Method::Dmcp => "dmcp",
            Method::Tg => "tg",
            Method::PoeLog => "poe_log",
            Method::PoeSeq => "poe_seq",
            Method::Ie => "ie",
            Method::IeNew => "ie_new",
            Method::MaskSeq => "mask_seq",
            Method::EeNewLog => "ee_new_log",
            Method::EeNewSeq => "ee_new_seq",
        }
    }

    /// Whether the method divides ID probabilities by an estimated prior.
    pub fn needs_prior(&self) -> bool {
        matches!(
            self,
            Method::Dmcp
                | Method::PoeLog
                | Method::PoeSeq
                | Method::IeNew
                | Method::MaskSeq
                | Method::EeNewLog
                | Method::EeNewSeq
        )
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Per-instance outcome of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// Original index of the prediction; None records an invalid extraction
    /// (possible for TG only), which is counted incorrect.
    pub predicted_original_index: Option<usize>,
    /// Method-scale score for every original index the method scored.
    pub option_scores: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<EliminationTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_generation: Option<String>,
}

impl MethodResult {
    fn scored(method: Method, scores: BTreeMap<usize, f64>) -> Self {
        let predicted = argmax_original(&scores);
        MethodResult {
            method,
            predicted_original_index: Some(predicted),
            option_scores: scores,
            trace: None,
            raw_generation: None,
        }
    }
}

/// Highest score wins; ties break to the lowest original index.
pub fn argmax_original(scores: &BTreeMap<usize, f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (&idx, &v) in scores {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((idx, v)),
        }
    }
    best.expect("argmax of empty score map").0
}

/// Everything a method needs besides the instance: the backend, the
/// few-shot demonstrations for answer-slot prompts, and scoring knobs.
pub struct ScoringContext<'a> {
    pub backend: &'a dyn Backend,
    pub shots: &'a [Shot],
    /// Candidate-normalize ID distributions.
    pub normalize: bool,
    pub tg_max_tokens: u32,
    pub tg_temperature: f64,
}

impl<'a> ScoringContext<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        ScoringContext {
            backend,
            shots: &[],
            normalize: false,
            tg_max_tokens: 64,
            tg_temperature: 0.1,
        }
    }

    pub fn with_shots(mut self, shots: &'a [Shot]) -> Self {
        self.shots = shots;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    /// The MCQ prompt for a space. Demonstrations are prepended for the
    /// answer slot; incorrect-option prompts are always zero-shot.
    pub fn mcq_prompt(
        &self,
        instance: &McqInstance,
        space: &OptionSpace,
        slot: PromptKind,
    ) -> Result<String> {
        let shots = if slot == PromptKind::McqAnswer { self.shots } else { &[] };
        build_fewshot(shots, &instance.question, space, slot)
    }

    /// Scores the space's ID tokens under the given slot.
    pub fn id_distribution(
        &self,
        instance: &McqInstance,
        space: &OptionSpace,
        slot: PromptKind,
    ) -> Result<IdDistribution> {
        let prompt = self.mcq_prompt(instance, space, slot)?;
        let logprobs = self.backend.id_token_logprobs(&prompt, &space.labels())?;
        IdDistribution::from_logprobs(&logprobs, self.normalize)
    }
}

/// Maps label-keyed scores back to original indices through the space.
pub fn scores_by_original(
    space: &OptionSpace,
    by_label: &BTreeMap<crate::core::OptionLabel, f64>,
) -> BTreeMap<usize, f64> {
    by_label
        .iter()
        .map(|(label, v)| {
            (space.original_of(*label).expect("label belongs to space"), *v)
        })
        .collect()
}

/// Highest total continuation log-probability of the option text given the
/// bare question.
pub fn score_lm(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let prompt = build_question_only(&instance.question);
    let mut scores = BTreeMap::new();
    for choice in &instance.choices {
        let (prefix, continuation) = continuation_parts(&prompt, &choice.text);
        let score = ctx.backend.continuation_logprob(&prefix, &continuation)?;
        scores.insert(choice.original_index, score.total_logprob);
    }
    Ok(MethodResult::scored(Method::Lm, scores))
}

/// LM normalized by continuation token count.
pub fn score_avg(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let prompt = build_question_only(&instance.question);
    let mut scores = BTreeMap::new();
    for choice in &instance.choices {
        let (prefix, continuation) = continuation_parts(&prompt, &choice.text);
        let score = ctx.backend.continuation_logprob(&prefix, &continuation)?;
        scores.insert(choice.original_index, score.average());
    }
    Ok(MethodResult::scored(Method::Avg, scores))
}

/// log P(y|q) - log P(y|q_domain), with the domain prefix "Answer:".
pub fn score_pmi_dc(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let question_prompt = build_question_only(&instance.question);
    let domain_prompt = build_domain_prompt();
    let mut scores = BTreeMap::new();
    for choice in &instance.choices {
        let (q_prefix, continuation) = continuation_parts(&question_prompt, &choice.text);
        let numerator = ctx.backend.continuation_logprob(&q_prefix, &continuation)?;
        let (d_prefix, continuation) = continuation_parts(&domain_prompt, &choice.text);
        let denominator = ctx.backend.continuation_logprob(&d_prefix, &continuation)?;
        scores.insert(
            choice.original_index,
            numerator.total_logprob - denominator.total_logprob,
        );
    }
    Ok(MethodResult::scored(Method::PmiDc, scores))
}

/// Length-normalized log-probability of the question given each option.
pub fn score_channel(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let mut scores = BTreeMap::new();
    for choice in &instance.choices {
        let prefix_prompt = build_channel_prefix(&choice.text);
        let (prefix, continuation) = continuation_parts(&prefix_prompt, &instance.question);
        let score = ctx.backend.continuation_logprob(&prefix, &continuation)?;
        scores.insert(choice.original_index, score.average());
    }
    Ok(MethodResult::scored(Method::Channel, scores))
}

/// Total log-probability of the option text given the question and the
/// full option block.
pub fn score_aolp(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let space = OptionSpace::full(instance);
    let scores = aolp_scores(instance, &space, ctx)?;
    Ok(MethodResult::scored(Method::Aolp, scores))
}

/// AOLP scoring over an arbitrary (possibly masked) space; only unmasked
/// entries are scored. Shared with the masking-based elimination variants.
pub fn aolp_scores(
    instance: &McqInstance,
    space: &OptionSpace,
    ctx: &ScoringContext,
) -> Result<BTreeMap<usize, f64>> {
    let prompt = ctx.mcq_prompt(instance, space, PromptKind::McqAnswer)?;
    let mut scores = BTreeMap::new();
    for (_, choice) in space.entries() {
        if space.is_masked(choice.original_index) {
            continue;
        }
        let (prefix, continuation) = continuation_parts(&prompt, &choice.text);
        let score = ctx.backend.continuation_logprob(&prefix, &continuation)?;
        scores.insert(choice.original_index, score.total_logprob);
    }
    Ok(scores)
}

/// Argmax over raw option-ID probabilities.
pub fn score_mcp(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let space = OptionSpace::full(instance);
    let dist = ctx.id_distribution(instance, &space, PromptKind::McqAnswer)?;
    let scores = scores_by_original(&space, &dist.probs);
    Ok(MethodResult::scored(Method::Mcp, scores))
}

/// MCP with the ID probabilities divided by the estimated prior.
pub fn score_dmcp(
    instance: &McqInstance,
    ctx: &ScoringContext,
    prior: &Prior,
) -> Result<MethodResult> {
    let space = OptionSpace::full(instance);
    if prior.space_size != space.size() {
        return Err(Error::PriorMismatch(format!(
            "instance {} has {} options but prior covers {}",
            instance.uid,
            space.size(),
            prior.space_size
        )));
    }
    let dist = ctx.id_distribution(instance, &space, PromptKind::McqAnswer)?;
    let debiased = apply_debias(&dist, prior)?;
    let scores = scores_by_original(&space, &debiased.scores);
    Ok(MethodResult::scored(Method::Dmcp, scores))
}

fn letter_word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-J])\b").expect("valid regex"))
}

/// Ordered extraction rules over a raw generation:
/// 1. a leading `X.` / `X)` / `(X)` marker,
/// 2. the first standalone valid label letter,
/// 3. the whole text equals an option text case-insensitively,
/// 4. otherwise invalid.
pub fn extract_answer(generation: &str, space: &OptionSpace) -> Option<usize> {
    let valid = |letter: char| {
        crate::core::OptionLabel::from_letter(letter)
            .ok()
            .and_then(|label| space.original_of(label))
    };
    let text = generation.trim_start();
    let mut chars = text.chars();
    match (chars.next(), chars.next(), chars.next()) {
        (Some('('), Some(letter), Some(')')) => {
            if let Some(idx) = valid(letter) {
                return Some(idx);
            }
        }
        (Some(letter), Some('.' | ')'), _) => {
            if let Some(idx) = valid(letter) {
                return Some(idx);
            }
        }
        _ => {}
    }
    for capture in letter_word_regex().find_iter(generation) {
        let letter = capture.as_str().chars().next().expect("single-letter match");
        if let Some(idx) = valid(letter) {
            return Some(idx);
        }
    }
    let trimmed = generation.trim().to_lowercase();
    for (_, choice) in space.entries() {
        if trimmed == choice.text.to_lowercase() {
            return Some(choice.original_index);
        }
    }
    None
}

/// Generates at the configured temperature and extracts with the fixed
/// rule set; an invalid extraction is a recorded outcome, not an error.
pub fn answer_tg(instance: &McqInstance, ctx: &ScoringContext) -> Result<MethodResult> {
    let space = OptionSpace::full(instance);
    let prompt = ctx.mcq_prompt(instance, &space, PromptKind::McqAnswer)?;
    let generation = ctx.backend.generate(&prompt, ctx.tg_max_tokens, ctx.tg_temperature)?;
    let predicted = extract_answer(&generation, &space);
    Ok(MethodResult {
        method: Method::Tg,
        predicted_original_index: predicted,
        option_scores: BTreeMap::new(),
        trace: None,
        raw_generation: Some(generation),
    })
}
