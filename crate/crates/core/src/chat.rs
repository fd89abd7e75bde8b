use serde::{Deserialize, Serialize};

use crate::ids::{CohortId, StageId};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AuthorKind {
    Participant,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatMessage {
    pub id: String,
    pub cohort_id: CohortId,
    pub stage_id: StageId,
    /// Public id for participants, agent id for mediators.
    pub author_id: String,
    pub author_kind: AuthorKind,
    pub display_name: String,
    pub text: String,
    pub timestamp: Timestamp,
}

impl ChatMessage {
    /// `[timestamp] displayName: message`
    pub fn history_line(&self) -> String {
        format!("[{}] {}: {}", self.timestamp.to_rfc3339(), self.display_name, self.text)
    }
}
