use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, StageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AgentRole {
    /// Traverses stages like a human.
    Participant,
    /// Attached to chat stages; never progresses through stages.
    Mediator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentProfile {
    pub display_name: String,
    #[serde(default)]
    pub avatar: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SamplingParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    512
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: default_temperature(),
            max_output_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelSettings {
    pub provider_id: String,
    pub model_name: String,
    #[serde(default)]
    pub sampling_params: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum PromptItem {
    ProfileBlock,
    SystemInstructions,
    StageContextRef { stage_id: StageId },
    ChatHistory,
    CustomText { text: String },
    PseudonymGuard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FieldType {
    Bool,
    Int,
    Real,
    Text,
}

impl FieldType {
    pub fn is_numeric(self) -> bool {
        matches!(self, FieldType::Int | FieldType::Real)
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldType::Bool => "bool",
            FieldType::Int => "int",
            FieldType::Real => "real",
            FieldType::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SchemaField {
    pub field_name: String,
    pub field_type: FieldType,
    #[serde(default)]
    pub description: String,
}

impl SchemaField {
    pub fn new(name: &str, ty: FieldType, description: &str) -> Self {
        SchemaField {
            field_name: name.to_string(),
            field_type: ty,
            description: description.to_string(),
        }
    }
}

/// Only respond when the named numeric field reaches the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResponseGate {
    pub field_name: String,
    pub threshold: f64,
}

pub const SHOULD_RESPOND: &str = "shouldRespond";
pub const RESPONSE: &str = "response";
pub const READY_TO_END_CHAT: &str = "readyToEndChat";

pub fn mandatory_fields() -> [SchemaField; 3] {
    [
        SchemaField::new(SHOULD_RESPOND, FieldType::Bool, "Whether you want to send a message now."),
        SchemaField::new(RESPONSE, FieldType::Text, "The message to send, if any."),
        SchemaField::new(
            READY_TO_END_CHAT,
            FieldType::Bool,
            "Whether the conversation has reached a natural end.",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentSpec {
    pub id: AgentId,
    pub role: AgentRole,
    pub profile: AgentProfile,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub persona_prompt: String,
    pub prompt_plan: Vec<PromptItem>,
    pub model: ModelSettings,
    /// Typing speed in words per minute.
    pub wpm: f64,
    #[serde(default)]
    pub structured_output_schema: Vec<SchemaField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_gate: Option<ResponseGate>,
}

impl AgentSpec {
    /// The configured schema with the three mandatory fields injected at the
    /// front when absent.
    pub fn effective_schema(&self) -> Vec<SchemaField> {
        let mut out: Vec<SchemaField> = mandatory_fields()
            .into_iter()
            .filter(|m| !self.structured_output_schema.iter().any(|f| f.field_name == m.field_name))
            .collect();
        out.extend(self.structured_output_schema.iter().cloned());
        out
    }

    pub fn default_prompt_plan() -> Vec<PromptItem> {
        vec![
            PromptItem::ProfileBlock,
            PromptItem::SystemInstructions,
            PromptItem::ChatHistory,
        ]
    }

    /// A mediator with the default plan plus one custom instruction.
    pub fn simple_mediator(id: &str, name: &str, instruction: &str, provider_id: &str) -> Self {
        AgentSpec {
            id: AgentId::from(id),
            role: AgentRole::Mediator,
            profile: AgentProfile {
                display_name: name.to_string(),
                avatar: String::new(),
            },
            persona_prompt: String::new(),
            prompt_plan: vec![
                PromptItem::ProfileBlock,
                PromptItem::SystemInstructions,
                PromptItem::CustomText {
                    text: instruction.to_string(),
                },
                PromptItem::ChatHistory,
            ],
            model: ModelSettings {
                provider_id: provider_id.to_string(),
                model_name: "default".to_string(),
                sampling_params: SamplingParams::default(),
            },
            wpm: 60.0,
            structured_output_schema: Vec::new(),
            response_gate: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mandatory_fields_are_injected_once() {
        let mut spec = AgentSpec::simple_mediator("m", "Mod", "ensure politeness", "scripted");
        assert_eq!(spec.effective_schema().len(), 3);
        spec.structured_output_schema = vec![
            SchemaField::new(SHOULD_RESPOND, FieldType::Bool, "custom description"),
            SchemaField::new("severityScore", FieldType::Int, "1-5"),
        ];
        let eff = spec.effective_schema();
        assert_eq!(eff.len(), 4);
        assert_eq!(eff.iter().filter(|f| f.field_name == SHOULD_RESPOND).count(), 1);
    }

    #[test]
    fn prompt_items_serialize_with_kind_tag() {
        let v = serde_json::to_value(PromptItem::StageContextRef { stage_id: "s1".into() }).unwrap();
        assert_eq!(v, serde_json::json!({"kind": "stageContextRef", "stageId": "s1"}));
    }
}
