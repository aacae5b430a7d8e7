//! Chat-completions wire format.
//!
//! Guided decoding uses the `structured_outputs` extension field
//! (`{"choice": [...]}` or `{"json": schema}`); assistant priming sends the
//! partial assistant turn last with `continue_final_message`. Both are
//! omitted when the provider config says they are unsupported.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use surveyor_core::chat::{ConversationTurn, Role};
use surveyor_core::methods::{RequestSpec, TokenLogprob};

use crate::config::ProviderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredOutputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ConversationTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_outputs: Option<StructuredOutputs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continue_final_message: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub add_generation_prompt: Option<bool>,
    #[serde(default)]
    pub stream: bool,
}

impl ChatRequest {
    /// Builds the wire request for `spec` preceded by `history`.
    pub fn build(spec: &RequestSpec, history: &[ConversationTurn], cfg: &ProviderConfig) -> Self {
        let structured_outputs = match (&spec.allowed_outputs, &spec.json_schema) {
            _ if !cfg.supports_guided_choice => None,
            (_, Some(schema)) => Some(StructuredOutputs {
                choice: None,
                json: Some(schema.clone()),
            }),
            (Some(choice), None) => Some(StructuredOutputs {
                choice: Some(choice.clone()),
                json: None,
            }),
            (None, None) => None,
        };
        let primed = spec.assistant_prefix().is_some() && cfg.supports_assistant_priming;
        Self {
            model: cfg.model.clone(),
            messages: spec.with_history(history),
            temperature: spec.sampling.temperature,
            seed: spec.sampling.seed,
            max_tokens: spec.sampling.max_tokens,
            logprobs: spec.want_logprobs.then_some(true),
            top_logprobs: if spec.want_logprobs { spec.top_logprobs } else { None },
            structured_outputs,
            continue_final_message: primed.then_some(true),
            add_generation_prompt: primed.then_some(false),
            stream: false,
        }
    }

    /// Plain request for auxiliary calls (paraphrase, judge).
    pub fn plain(messages: &[ConversationTurn], cfg: &ProviderConfig, seed: Option<u64>) -> Self {
        Self {
            model: cfg.model.clone(),
            messages: messages.to_vec(),
            temperature: Some(0.0),
            seed,
            max_tokens: cfg.max_tokens,
            logprobs: None,
            top_logprobs: None,
            structured_outputs: None,
            continue_final_message: None,
            add_generation_prompt: None,
            stream: false,
        }
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoice {
    #[serde(default)]
    pub index: u32,
    pub message: WireMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireUsage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub id: Option<String>,
    pub choices: Vec<WireChoice>,
    #[serde(default)]
    pub usage: Option<WireUsage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

/// A decoded successful completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Top-k alternatives at the first generated position.
    pub top_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub finish_reason: Option<String>,
}

impl ChatResponse {
    pub fn into_completion(self) -> Result<Completion, String> {
        let usage = self.usage.unwrap_or_default();
        let choice = self.choices.into_iter().next().ok_or("response has no choices")?;
        let top_logprobs = choice
            .logprobs
            .and_then(|l| l.content)
            .and_then(|c| c.into_iter().next())
            .map(|first| {
                first
                    .top_logprobs
                    .into_iter()
                    .map(|t| TokenLogprob::new(t.token, t.logprob))
                    .collect()
            });
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            top_logprobs,
            usage: Usage {
                input_tokens: usage.prompt_tokens,
                output_tokens: usage.completion_tokens,
            },
            finish_reason: choice.finish_reason,
        })
    }
}
