//! Domain types for questions, option spaces, distributions, and traces,
//! plus the relabeling algebra every answering method shares.
//!
//! All types here are immutable values; operations return new values. They
//! are safe to share across worker threads without coordination.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest supported option count; labels run A..J.
pub const MAX_OPTIONS: usize = 10;

/// A single-letter option ID at a position in the *current* option space.
///
/// The letter is always derived from the position: index 0 is 'A', index 1
/// is 'B', and so on. Labels are presentation; original indices are identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionLabel {
    index: usize,
}

impl OptionLabel {
    pub fn new(index: usize) -> Result<Self> {
        if index >= MAX_OPTIONS {
            return Err(Error::Precondition(format!(
                "label index {index} exceeds maximum of {MAX_OPTIONS} options"
            )));
        }
        Ok(OptionLabel { index })
    }

    pub fn from_letter(letter: char) -> Result<Self> {
        if !letter.is_ascii_uppercase() {
            return Err(Error::Precondition(format!("invalid label letter {letter:?}")));
        }
        OptionLabel::new((letter as u8 - b'A') as usize)
    }

    /// Zero-based position in the containing space.
    pub fn index(&self) -> usize {
        self.index
    }

    /// The uppercase letter shown in prompts.
    pub fn letter(&self) -> char {
        (b'A' + self.index as u8) as char
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl Serialize for OptionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.letter().to_string())
    }
}

impl<'de> Deserialize<'de> for OptionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => OptionLabel::from_letter(c).map_err(D::Error::custom),
            _ => Err(D::Error::custom(format!("invalid option label {s:?}"))),
        }
    }
}

/// One option as loaded from the dataset. `original_index` is stable across
/// all eliminations and maskings; it is the identity used in traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub original_index: usize,
    pub text: String,
}

/// One multiple-choice question with ordered choices and a gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqInstance {
    pub uid: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub gold_index: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl McqInstance {
    /// Builds and validates an instance. Loaders additionally require at
    /// least two options; the core type accepts one so that degenerate
    /// single-option behavior stays expressible in tests.
    pub fn new(
        uid: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        gold_index: usize,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let uid = uid.into();
        let invalid = |reason: String| Error::InvalidInstance { uid: uid.clone(), reason };
        if options.is_empty() || options.len() > MAX_OPTIONS {
            return Err(invalid(format!(
                "option count {} outside 1..={MAX_OPTIONS}",
                options.len()
            )));
        }
        if gold_index >= options.len() {
            return Err(invalid(format!(
                "gold index {gold_index} out of range for {} options",
                options.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for text in &options {
            if text.is_empty() {
                return Err(invalid("empty option text".to_string()));
            }
            if !seen.insert(text.as_str()) {
                return Err(invalid(format!("duplicate option text {text:?}")));
            }
        }
        let choices = options
            .into_iter()
            .enumerate()
            .map(|(original_index, text)| Choice { original_index, text })
            .collect();
        Ok(McqInstance { uid, question: question.into(), choices, gold_index, meta })
    }

    pub fn option_count(&self) -> usize {
        self.choices.len()
    }

    pub fn gold_text(&self) -> &str {
        &self.choices[self.gold_index].text
    }
}

/// The current live set of (label, choice) pairs. Elimination removes
/// entries and relabels; masking keeps the entry but replaces its rendered
/// text with a mask string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSpace {
    entries: Vec<Choice>,
    masked: BTreeSet<usize>,
}

impl OptionSpace {
    /// The full space of an instance: labels A.. in original order, nothing masked.
    pub fn full(instance: &McqInstance) -> Self {
        OptionSpace { entries: instance.choices.clone(), masked: BTreeSet::new() }
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Labels A.. in entry order.
    pub fn labels(&self) -> Vec<OptionLabel> {
        (0..self.entries.len()).map(|i| OptionLabel { index: i }).collect()
    }

    /// (label, choice) pairs in entry order.
    pub fn entries(&self) -> impl Iterator<Item = (OptionLabel, &Choice)> {
        self.entries.iter().enumerate().map(|(i, c)| (OptionLabel { index: i }, c))
    }

    pub fn masked(&self) -> &BTreeSet<usize> {
        &self.masked
    }

    pub fn is_masked(&self, original_index: usize) -> bool {
        self.masked.contains(&original_index)
    }

    /// Current label of an original index, if it survives in this space.
    pub fn label_of(&self, original_index: usize) -> Option<OptionLabel> {
        self.entries
            .iter()
            .position(|c| c.original_index == original_index)
            .map(|index| OptionLabel { index })
    }

    /// Original index carried by a label.
    pub fn original_of(&self, label: OptionLabel) -> Option<usize> {
        self.entries.get(label.index()).map(|c| c.original_index)
    }

    pub fn choice_at(&self, label: OptionLabel) -> Option<&Choice> {
        self.entries.get(label.index())
    }

    /// Labels whose entries are not masked, in entry order.
    pub fn unmasked_labels(&self) -> Vec<OptionLabel> {
        self.entries()
            .filter(|(_, c)| !self.masked.contains(&c.original_index))
            .map(|(l, _)| l)
            .collect()
    }

    /// Removes the given original indices and relabels survivors
    /// contiguously from 'A', preserving relative order. The masked set is
    /// restricted to survivors. Empty removal is the identity.
    pub fn relabel_after_elimination(&self, remove: &BTreeSet<usize>) -> Result<Self> {
        let present: BTreeSet<usize> = self.entries.iter().map(|c| c.original_index).collect();
        for idx in remove {
            if !present.contains(idx) {
                return Err(Error::UnknownIndex(*idx));
            }
        }
        if remove.len() == present.len() {
            return Err(Error::EmptyOptionSpace);
        }
        let entries: Vec<Choice> = self
            .entries
            .iter()
            .filter(|c| !remove.contains(&c.original_index))
            .cloned()
            .collect();
        let masked = self
            .masked
            .iter()
            .copied()
            .filter(|idx| !remove.contains(idx))
            .collect();
        Ok(OptionSpace { entries, masked })
    }

    /// Adds original indices to the masked set. Masking never removes an
    /// entry and never changes labels.
    pub fn with_masked(&self, add: &BTreeSet<usize>) -> Result<Self> {
        let present: BTreeSet<usize> = self.entries.iter().map(|c| c.original_index).collect();
        for idx in add {
            if !present.contains(idx) {
                return Err(Error::UnknownIndex(*idx));
            }
        }
        let mut masked = self.masked.clone();
        masked.extend(add.iter().copied());
        Ok(OptionSpace { entries: self.entries.clone(), masked })
    }

    /// One line per entry, `<letter>. <text>`, with masked entries' text
    /// replaced by `mask_string`. No trailing newline.
    pub fn render_option_block(&self, mask_string: &str) -> String {
        self.entries()
            .map(|(label, choice)| {
                let text =
                    if self.masked.contains(&choice.original_index) { mask_string } else { choice.text.as_str() };
                format!("{}. {}", label.letter(), text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Per-label raw probabilities of option-ID tokens for one scored space.
///
/// Every label of the scored space has a strictly positive entry; backends
/// floor-substitute labels missing from a top-k response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdDistribution {
    pub probs: BTreeMap<OptionLabel, f64>,
    pub space_size: usize,
}

impl IdDistribution {
    /// Converts log-probabilities to probabilities, optionally normalizing
    /// over the candidate labels.
    pub fn from_logprobs(logprobs: &BTreeMap<OptionLabel, f64>, normalize: bool) -> Result<Self> {
        if logprobs.is_empty() {
            return Err(Error::Precondition("empty log-probability map".to_string()));
        }
        let mut probs = BTreeMap::new();
        for (label, lp) in logprobs {
            if !lp.is_finite() {
                return Err(Error::Decode(format!(
                    "non-finite log-probability for label {label}"
                )));
            }
            probs.insert(*label, lp.exp());
        }
        if normalize {
            let sum: f64 = probs.values().sum();
            if sum <= 0.0 {
                return Err(Error::Decode("probabilities sum to zero".to_string()));
            }
            for v in probs.values_mut() {
                *v /= sum;
            }
        }
        let space_size = probs.len();
        Ok(IdDistribution { probs, space_size })
    }

    /// Label with the highest probability; ties break to the lowest index.
    pub fn argmax(&self) -> OptionLabel {
        argmax_label(&self.probs)
    }
}

/// Prior-corrected scores: raw probability divided by the prior, per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedDistribution {
    pub scores: BTreeMap<OptionLabel, f64>,
    pub prior_id: String,
}

impl DebiasedDistribution {
    pub fn argmax(&self) -> OptionLabel {
        argmax_label(&self.scores)
    }

    pub fn argmin(&self) -> OptionLabel {
        argmin_label(&self.scores)
    }

    /// Score divided by the sum over this space's labels, for comparisons
    /// on a common [0, 1] scale.
    pub fn normalized(&self, label: OptionLabel) -> Option<f64> {
        let sum: f64 = self.scores.values().sum();
        self.scores.get(&label).map(|s| s / sum)
    }
}

/// Highest-valued label; ties break to the lowest index, which is also the
/// lowest original index since spaces preserve relative order.
pub fn argmax_label(scores: &BTreeMap<OptionLabel, f64>) -> OptionLabel {
    let mut best: Option<(OptionLabel, f64)> = None;
    for (&label, &v) in scores {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((label, v)),
        }
    }
    best.expect("argmax of empty score map").0
}

/// Lowest-valued label; ties break to the lowest index.
pub fn argmin_label(scores: &BTreeMap<OptionLabel, f64>) -> OptionLabel {
    let mut best: Option<(OptionLabel, f64)> = None;
    for (&label, &v) in scores {
        match best {
            Some((_, bv)) if v >= bv => {}
            _ => best = Some((label, v)),
        }
    }
    best.expect("argmin of empty score map").0
}

/// One elimination or masking round in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    /// Mean-of-logs threshold for threshold rules; None for sequential rounds.
    pub threshold: Option<f64>,
    /// Original indices removed from the space this round.
    pub eliminated_original_indices: BTreeSet<usize>,
    /// Original indices masked this round (entries retained).
    pub masked_original_indices: BTreeSet<usize>,
    /// Old label -> new label for survivors; empty when labels are unchanged.
    pub relabel_map: BTreeMap<OptionLabel, OptionLabel>,
    /// Debiased scores as seen when the round's decision was taken, keyed by
    /// the labels of the space *before* this round's removal/masking.
    pub distribution_snapshot: DebiasedDistribution,
}

/// Full audit of an elimination run: every round plus the final answer.
///
/// Traces store original indices as the stable identity; letters are derived
/// presentation reconstructible by replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationTrace {
    pub method: String,
    pub rounds: Vec<Round>,
    pub final_answer: usize,
    /// Set when a degenerate input forced a fallback answer path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl EliminationTrace {
    /// Replays the recorded rounds against the instance's full space and
    /// returns the resulting space. Validates the trace invariants on the way.
    pub fn replay(&self, instance: &McqInstance) -> Result<OptionSpace> {
        let mut space = OptionSpace::full(instance);
        let mut all_eliminated: BTreeSet<usize> = BTreeSet::new();
        for round in &self.rounds {
            for idx in &round.eliminated_original_indices {
                if !all_eliminated.insert(*idx) {
                    return Err(Error::Precondition(format!(
                        "index {idx} eliminated in more than one round"
                    )));
                }
            }
            if !round.masked_original_indices.is_empty() {
                space = space.with_masked(&round.masked_original_indices)?;
            }
            if !round.eliminated_original_indices.is_empty() {
                space = space.relabel_after_elimination(&round.eliminated_original_indices)?;
            }
        }
        if all_eliminated.contains(&self.final_answer) {
            return Err(Error::Precondition(format!(
                "final answer {} appears in an eliminated set",
                self.final_answer
            )));
        }
        if space.label_of(self.final_answer).is_none() {
            return Err(Error::Precondition(format!(
                "final answer {} not present in replayed space",
                self.final_answer
            )));
        }
        Ok(space)
    }
}
