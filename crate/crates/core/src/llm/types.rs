use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::spec::SamplingParams;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatCompletionRequest {
    pub messages: Vec<Message>,
    pub sampling_params: SamplingParams,
}

impl ChatCompletionRequest {
    pub fn single_user(prompt: impl Into<String>, sampling_params: SamplingParams) -> Self {
        ChatCompletionRequest {
            messages: vec![Message {
                role: Role::User,
                content: prompt.into(),
            }],
            sampling_params,
        }
    }

    /// All message text, newline-joined. Scripted matchers run against this.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenCounts {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatCompletionResponse {
    pub content: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub token_counts: TokenCounts,
}

/// Opaque handle into the key store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuthKeyRef(pub String);

impl fmt::Display for AuthKeyRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Decrypted key material. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(s: impl Into<String>) -> Self {
        ApiKey(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProviderConfig {
    pub provider_id: String,
    pub endpoint_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_key_ref: Option<AuthKeyRef>,
    pub model_name: String,
    pub sampling_params: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "type", content = "detail", rename_all = "camelCase")]
pub enum LlmError {
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited")]
    RateLimited,
    #[error("attempt timed out")]
    Timeout,
    #[error("provider error: {0}")]
    Server(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("unknown provider '{0}'")]
    UnknownProvider(String),
    #[error("gave up after {attempts} attempts, last error: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<LlmError> },
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::RateLimited | LlmError::Timeout | LlmError::Server(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Attempt {
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<LlmError>,
}

/// Result of one logical `complete` call, including every attempt made.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallOutcome {
    pub attempts: Vec<Attempt>,
    pub result: Result<ChatCompletionResponse, LlmError>,
}
