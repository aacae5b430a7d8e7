//! Chat message primitives shared by rendering, paraphrasing and judging.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub role: Role,
    pub content: String,
}

impl ConversationTurn {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("provider error: {0}")]
pub struct ProviderError(pub String);

/// Synchronous text completion, used for the auxiliary model calls made
/// while perturbing (paraphrase) and parsing (judge).
pub trait CompletionProvider {
    fn complete(&self, messages: &[ConversationTurn]) -> Result<String, ProviderError>;
}

impl<F> CompletionProvider for F
where
    F: Fn(&[ConversationTurn]) -> Result<String, ProviderError>,
{
    fn complete(&self, messages: &[ConversationTurn]) -> Result<String, ProviderError> {
        self(messages)
    }
}
