//! OpenAI-compatible completions client with logprob scoring.
//!
//! Speaks `POST <base_url>/v1/completions` with the de-facto standard body
//! `{model, prompt, max_tokens, temperature, logprobs, echo}` and reads
//! `choices[0].logprobs.{tokens, token_logprobs, top_logprobs, text_offset}`.
//! Scoring requests are issued for raw model log-probabilities; the
//! temperature setting applies to generation only.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::core::OptionLabel;
use crate::error::{Error, Result};

use super::{Backend, ContinuationScore};

/// How the label's single token is spelled at the answer slot.
///
/// With `LeadingSpace` the prompt's trailing slot space is absorbed into the
/// token (" A"), which is the single-token form in common vocabularies. The
/// `Bare` switch sends the prompt unchanged and scores the bare letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTokenStyle {
    LeadingSpace,
    Bare,
}

impl Default for LabelTokenStyle {
    fn default() -> Self {
        LabelTokenStyle::LeadingSpace
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub label_style: LabelTokenStyle,
    /// Top-k to request on ID-scoring calls.
    pub logprobs_top_k: u32,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            label_style: LabelTokenStyle::default(),
            logprobs_top_k: 20,
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    logprobs: u32,
    echo: bool,
}

#[derive(Debug, Deserialize)]
pub(crate) struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct WireChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize, Default)]
pub(crate) struct WireLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<BTreeMap<String, f64>>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

pub struct HttpBackend {
    config: HttpConfig,
    tag: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("failed to build HTTP client: {e}")))?;
        let tag = format!("{}@{}", config.model, config.base_url.trim_end_matches('/'));
        Ok(HttpBackend { config, tag, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// POST with up to `max_attempts` tries on transport failures and 5xx.
    fn post(&self, body: &WireRequest) -> Result<WireResponse> {
        let url = self.endpoint();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut request = self.client.post(&url).json(body);
            if let Some(key) = &self.config.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = match request.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<WireResponse>().map_err(|e| {
                            Error::Decode(format!("invalid completions response JSON: {e}"))
                        });
                    }
                    let retriable = status.is_server_error();
                    let body = resp.text().unwrap_or_default();
                    (retriable, format!("HTTP {status}: {body}"))
                }
                Err(e) => (true, format!("transport: {e}")),
            };
            let (retriable, message) = outcome;
            if !retriable || attempt >= self.config.max_attempts {
                return Err(Error::Transport { attempts: attempt, message });
            }
            let backoff = self.config.backoff_base * 2u32.pow(attempt - 1);
            debug!(attempt, ?backoff, "retrying completions request");
            std::thread::sleep(backoff);
        }
    }
}

/// Extracts per-label logprobs from the first generated position, applying
/// the floor rule for labels the top-k omits: (minimum returned logprob) - 10.
pub(crate) fn ids_from_response(
    response: &WireResponse,
    labels: &[OptionLabel],
    style: LabelTokenStyle,
) -> Result<BTreeMap<OptionLabel, f64>> {
    let choice = response
        .choices
        .first()
        .ok_or_else(|| Error::Decode("response has no choices".into()))?;
    let logprobs = choice.logprobs.as_ref().ok_or_else(|| {
        Error::Capability(
            "endpoint returned no logprobs; ID scoring needs a logprobs-capable completions endpoint"
                .into(),
        )
    })?;
    let top = logprobs
        .top_logprobs
        .first()
        .and_then(|m| m.as_ref())
        .ok_or_else(|| Error::Decode("response has no top_logprobs for the answer slot".into()))?;
    if top.is_empty() {
        return Err(Error::Decode("empty top_logprobs map".into()));
    }
    let floor = top.values().copied().fold(f64::INFINITY, f64::min) - 10.0;
    let mut out = BTreeMap::new();
    for label in labels {
        let token = match style {
            LabelTokenStyle::LeadingSpace => format!(" {}", label.letter()),
            LabelTokenStyle::Bare => label.letter().to_string(),
        };
        let lp = top.get(&token).copied().unwrap_or(floor);
        if !lp.is_finite() {
            return Err(Error::Decode(format!("non-finite logprob for label {label}")));
        }
        out.insert(*label, lp);
    }
    Ok(out)
}

/// Sums echo-scored token logprobs over the continuation span, located via
/// `text_offset` at or past the prefix length.
pub(crate) fn continuation_from_response(
    response: &WireResponse,
    prefix_len: usize,
) -> Result<ContinuationScore> {
    let choice = response
        .choices
        .first()
        .ok_or_else(|| Error::Decode("response has no choices".into()))?;
    let logprobs = choice.logprobs.as_ref().ok_or_else(|| {
        Error::Capability(
            "endpoint cannot echo-score; continuation scoring needs echo+logprobs support".into(),
        )
    })?;
    if logprobs.text_offset.len() != logprobs.token_logprobs.len() {
        return Err(Error::Decode("text_offset and token_logprobs lengths differ".into()));
    }
    if logprobs.text_offset.is_empty() {
        return Err(Error::Capability(
            "endpoint returned no echoed tokens; continuation scoring needs echo+logprobs support"
                .into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (offset, lp) in logprobs.text_offset.iter().zip(&logprobs.token_logprobs) {
        if *offset < prefix_len {
            continue;
        }
        match lp {
            Some(lp) => {
                total += lp;
                count += 1;
            }
            // The first token of the whole text has no conditional
            // probability; it can only land in the span when the prefix is
            // empty.
            None => continue,
        }
    }
    ContinuationScore::new(total, count)
}

impl Backend for HttpBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn id_token_logprobs(
        &self,
        prompt: &str,
        labels: &[OptionLabel],
    ) -> Result<BTreeMap<OptionLabel, f64>> {
        if labels.is_empty() {
            return Err(Error::Precondition("no candidate labels".into()));
        }
        let sent_prompt = match self.config.label_style {
            LabelTokenStyle::LeadingSpace => prompt.strip_suffix(' ').unwrap_or(prompt),
            LabelTokenStyle::Bare => prompt,
        };
        let body = WireRequest {
            model: &self.config.model,
            prompt: sent_prompt,
            max_tokens: 1,
            temperature: 0.0,
            logprobs: self.config.logprobs_top_k,
            echo: false,
        };
        let response = self.post(&body)?;
        ids_from_response(&response, labels, self.config.label_style)
    }

    fn continuation_logprob(&self, prefix: &str, continuation: &str) -> Result<ContinuationScore> {
        if continuation.is_empty() {
            return Err(Error::Precondition("empty continuation".into()));
        }
        let full = format!("{prefix}{continuation}");
        let body = WireRequest {
            model: &self.config.model,
            prompt: &full,
            max_tokens: 0,
            temperature: 0.0,
            logprobs: 1,
            echo: true,
        };
        let response = self.post(&body)?;
        continuation_from_response(&response, prefix.len())
    }

    fn generate(&self, prompt: &str, max_tokens: u32, temperature: f64) -> Result<String> {
        if max_tokens == 0 {
            return Err(Error::Precondition("generation requires max_tokens >= 1".into()));
        }
        let body = WireRequest {
            model: &self.config.model,
            prompt,
            max_tokens,
            temperature,
            logprobs: 0,
            echo: false,
        };
        let response = self.post(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Decode("response has no choices".into()))?;
        Ok(choice.text)
    }
}
