//! Chat-completions wire dialect over HTTPS.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use crate::llm::types::{ApiKey, ChatCompletionRequest, ChatCompletionResponse, LlmError, ProviderConfig, TokenCounts};
use crate::llm::Provider;

/// How the key is presented to the endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthHeader {
    /// `Authorization: Bearer <key>`
    Bearer,
    /// `<name>: <key>`
    Custom(String),
}

#[derive(Debug)]
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    auth: AuthHeader,
}

impl HttpProvider {
    pub fn new(auth: AuthHeader) -> Self {
        HttpProvider {
            client: reqwest::blocking::Client::new(),
            auth,
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

impl Provider for HttpProvider {
    fn send(
        &self,
        config: &ProviderConfig,
        key: Option<&ApiKey>,
        req: &ChatCompletionRequest,
        timeout: Duration,
    ) -> Result<ChatCompletionResponse, LlmError> {
        let body = json!({
            "model": config.model_name,
            "messages": req.messages,
            "temperature": req.sampling_params.temperature,
            "max_tokens": req.sampling_params.max_output_tokens,
        });
        let mut builder = self.client.post(&config.endpoint_url).timeout(timeout).json(&body);
        if let Some(key) = key {
            builder = match &self.auth {
                AuthHeader::Bearer => builder.bearer_auth(key.expose()),
                AuthHeader::Custom(name) => builder.header(name.as_str(), key.expose()),
            };
        }
        let started = Instant::now();
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Server(format!("transport: {}", e.without_url()))
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(LlmError::AuthFailure(format!("status {}", status.as_u16())));
        }
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited);
        }
        if status.is_server_error() {
            return Err(LlmError::Server(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(LlmError::BadRequest(format!("status {}", status.as_u16())));
        }
        let wire: WireResponse = resp.json().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Server(format!("malformed response body: {}", e.without_url()))
            }
        })?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Server("response has no choices".to_string()))?;
        Ok(ChatCompletionResponse {
            content: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_else(|| "unknown".to_string()),
            latency_ms,
            token_counts: wire
                .usage
                .map(|u| TokenCounts {
                    prompt: u.prompt_tokens,
                    completion: u.completion_tokens,
                })
                .unwrap_or_default(),
        })
    }
}
