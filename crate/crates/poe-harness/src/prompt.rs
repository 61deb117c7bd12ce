//! Byte-exact prompt construction, including few-shot assembly.
//!
//! Open slots end with a trailing space ("Answer: ", "Incorrect Option: ");
//! demonstration answers are written without one ("Answer:A"). Both forms
//! are reproduced literally. Newlines are LF only and no prompt ends with a
//! trailing newline. Golden fixtures live under `fixtures/prompts/`, one per
//! prompt kind, and the tests compare against them byte for byte.

use serde::{Deserialize, Serialize};

use crate::core::{McqInstance, OptionSpace};
use crate::error::{Error, Result};

/// Text substituted for masked options in rendered choice blocks.
pub const MASK_STRING: &str = "[MASK]";

/// The closed set of prompt shapes the harness emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    QuestionOnly,
    McqAnswer,
    McqIncorrect,
    DomainOnly,
}

/// `"Question: {q}\nAnswer: "` — trailing single space, no trailing newline.
pub fn build_question_only(question: &str) -> String {
    format!("Question: {question}\nAnswer: ")
}

/// The conditioning prefix for domain-conditional scoring: exactly `"Answer:"`.
pub fn build_domain_prompt() -> String {
    "Answer:".to_string()
}

/// Full MCQ block ending in the open answer slot or the incorrect-option slot.
pub fn build_mcq_prompt(question: &str, space: &OptionSpace, slot: PromptKind) -> Result<String> {
    if space.is_empty() {
        return Err(Error::EmptyOptionSpace);
    }
    let slot_line = match slot {
        PromptKind::McqAnswer => "Answer: ",
        PromptKind::McqIncorrect => "Incorrect Option: ",
        other => {
            return Err(Error::Precondition(format!(
                "build_mcq_prompt requires an MCQ slot, got {other:?}"
            )))
        }
    };
    Ok(format!(
        "Question: {question}\nChoices:\n{block}\n{slot_line}",
        block = space.render_option_block(MASK_STRING),
    ))
}

/// One few-shot demonstration: a question, its full option space, and the
/// gold answer letter rendered as `Answer:{letter}`.
#[derive(Debug, Clone)]
pub struct Shot {
    pub question: String,
    pub space: OptionSpace,
    pub answer: char,
}

impl Shot {
    pub fn from_instance(instance: &McqInstance) -> Self {
        let space = OptionSpace::full(instance);
        let answer = space
            .label_of(instance.gold_index)
            .expect("gold index present in full space")
            .letter();
        Shot { question: instance.question.clone(), space, answer }
    }

    fn render(&self) -> Result<String> {
        if self.space.is_empty() {
            return Err(Error::EmptyOptionSpace);
        }
        Ok(format!(
            "Question: {q}\nChoices:\n{block}\nAnswer:{letter}",
            q = self.question,
            block = self.space.render_option_block(MASK_STRING),
            letter = self.answer,
        ))
    }
}

/// Demonstration blocks followed by the target MCQ block, separated from
/// each other and from the target by exactly one blank line. Zero shots
/// degenerates to `build_mcq_prompt`.
pub fn build_fewshot(
    shots: &[Shot],
    question: &str,
    space: &OptionSpace,
    slot: PromptKind,
) -> Result<String> {
    let target = build_mcq_prompt(question, space, slot)?;
    if shots.is_empty() {
        return Ok(target);
    }
    let mut blocks = Vec::with_capacity(shots.len() + 1);
    for shot in shots {
        blocks.push(shot.render()?);
    }
    blocks.push(target);
    Ok(blocks.join("\n\n"))
}

/// Channel scoring swaps roles: the option conditions, the question is scored.
pub fn build_channel_prefix(option_text: &str) -> String {
    format!("Answer: {option_text}\nQuestion: ")
}

/// Splits a prompt ending in an open slot into the scored (prefix,
/// continuation) pair. The slot's trailing space is absorbed into the
/// continuation so the continuation tokenizes with its natural leading space.
pub fn continuation_parts(prompt_with_slot: &str, text: &str) -> (String, String) {
    let prefix = prompt_with_slot.strip_suffix(' ').unwrap_or(prompt_with_slot);
    (prefix.to_string(), format!(" {text}"))
}
