use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::spec::AgentSpec;
use crate::ids::{AgentId, ExperimentId, ExperimenterId, StageId};
use crate::model::stage::StageConfig;
use crate::presence::PresenceSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AccessRole {
    Reader,
    Editor,
    Creator,
}

impl AccessRole {
    pub fn can_edit(self) -> bool {
        self >= AccessRole::Editor
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metadata {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub public_visibility: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prolific_redirect_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prolific_completion_code: Option<String>,
    /// Listed in the template gallery.
    #[serde(default)]
    pub template: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentSettings {
    #[serde(default)]
    pub presence: PresenceSettings,
    #[serde(default = "default_offer_seconds")]
    pub transfer_offer_seconds: u32,
}

fn default_offer_seconds() -> u32 {
    120
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            presence: PresenceSettings::default(),
            transfer_offer_seconds: default_offer_seconds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    pub metadata: Metadata,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub agent_templates: Vec<AgentSpec>,
    pub roles: BTreeMap<ExperimenterId, AccessRole>,
    #[serde(default)]
    pub settings: ExperimentSettings,
}

impl ExperimentConfig {
    pub fn stage_index(&self, id: &StageId) -> Option<usize> {
        self.stages.iter().position(|s| &s.id == id)
    }

    pub fn stage(&self, id: &StageId) -> Option<&StageConfig> {
        self.stages.iter().find(|s| &s.id == id)
    }

    pub fn agent(&self, id: &AgentId) -> Option<&AgentSpec> {
        self.agent_templates.iter().find(|a| &a.id == id)
    }

    pub fn role_of(&self, who: &ExperimenterId) -> Option<AccessRole> {
        self.roles.get(who).copied()
    }

    pub fn creator(&self) -> Option<&ExperimenterId> {
        self.roles
            .iter()
            .find(|(_, r)| **r == AccessRole::Creator)
            .map(|(who, _)| who)
    }
}
