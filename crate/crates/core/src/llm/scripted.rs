//! Deterministic canned-response provider for tests and simulation.

use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::types::{ApiKey, ChatCompletionRequest, ChatCompletionResponse, LlmError, ProviderConfig, TokenCounts};
use crate::llm::Provider;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Matcher {
    Contains(String),
    Regex(String),
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    /// Text, or any JSON value which is sent in its compact form.
    pub response: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Script {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default)]
    pub default: Option<serde_json::Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("reading script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad regex in entry {index}: {source}")]
    Regex { index: usize, source: regex::Error },
}

pub const DEFAULT_SCRIPTED_RESPONSE: &str =
    r#"{"shouldRespond": false, "response": "", "readyToEndChat": true}"#;

#[derive(Debug)]
pub struct ScriptedProvider {
    entries: Vec<(CompiledMatcher, String)>,
    default: String,
}

#[derive(Debug)]
enum CompiledMatcher {
    Contains(String),
    Regex(Regex),
    Any,
}

fn render(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ScriptedProvider {
    pub fn new(script: Script) -> Result<Self, ScriptError> {
        let mut entries = Vec::with_capacity(script.entries.len());
        for (index, e) in script.entries.into_iter().enumerate() {
            let m = match e.matcher {
                Matcher::Contains(s) => CompiledMatcher::Contains(s),
                Matcher::Regex(r) => CompiledMatcher::Regex(Regex::new(&r).map_err(|source| ScriptError::Regex { index, source })?),
                Matcher::Any => CompiledMatcher::Any,
            };
            entries.push((m, render(&e.response)));
        }
        Ok(ScriptedProvider {
            entries,
            default: script
                .default
                .as_ref()
                .map(render)
                .unwrap_or_else(|| DEFAULT_SCRIPTED_RESPONSE.to_string()),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let bytes = std::fs::read(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(serde_json::from_slice(&bytes)?)
    }

    pub fn respond(&self, prompt: &str) -> &str {
        self.entries
            .iter()
            .find(|(m, _)| match m {
                CompiledMatcher::Contains(s) => prompt.contains(s.as_str()),
                CompiledMatcher::Regex(r) => r.is_match(prompt),
                CompiledMatcher::Any => true,
            })
            .map(|(_, r)| r.as_str())
            .unwrap_or(&self.default)
    }
}

impl Provider for ScriptedProvider {
    fn send(
        &self,
        _config: &ProviderConfig,
        _key: Option<&ApiKey>,
        req: &ChatCompletionRequest,
        _timeout: Duration,
    ) -> Result<ChatCompletionResponse, LlmError> {
        let prompt = req.prompt_text();
        let content = self.respond(&prompt).to_string();
        Ok(ChatCompletionResponse {
            token_counts: TokenCounts {
                prompt: prompt.split_whitespace().count() as u32,
                completion: content.split_whitespace().count() as u32,
            },
            content,
            finish_reason: "stop".to_string(),
            latency_ms: 0,
        })
    }

    fn requires_key(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn first_match_wins_then_default() {
        let script: Script = serde_json::from_value(json!({
            "entries": [
                {"match": {"contains": "ensure politeness"}, "response": {"shouldRespond": true, "response": "Please be kind.", "readyToEndChat": false}},
                {"match": {"regex": "^Hello"}, "response": "hi"},
                {"match": "any", "response": "fallback"}
            ]
        }))
        .unwrap();
        let p = ScriptedProvider::new(script).unwrap();
        assert!(p.respond("... ensure politeness ...").contains("Please be kind."));
        assert_eq!(p.respond("Hello there"), "hi");
        assert_eq!(p.respond("zzz"), "fallback");
    }

    #[test]
    fn empty_script_returns_default() {
        let p = ScriptedProvider::new(Script::default()).unwrap();
        assert_eq!(p.respond("anything"), DEFAULT_SCRIPTED_RESPONSE);
        let p = ScriptedProvider::new(Script {
            entries: vec![],
            default: Some(json!("custom")),
        })
        .unwrap();
        assert_eq!(p.respond("anything"), "custom");
    }
}
