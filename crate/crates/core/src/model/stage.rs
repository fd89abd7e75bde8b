use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, QuestionId, StageId};
use crate::model::answer::AnswerValue;
use crate::money::Money;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageConfig {
    pub id: StageId,
    pub title: String,
    #[serde(default)]
    pub markdown_body: String,
    #[serde(default)]
    pub ui: StageUi,
    #[serde(flatten)]
    pub params: StageParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageUi {
    #[serde(default = "default_true")]
    pub show_progress_bar: bool,
    #[serde(default)]
    pub wait_for_all_participants: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_advance_timer_seconds: Option<u32>,
    /// With `waitForAllParticipants`, the gate also needs this many
    /// non-terminal members before it opens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_participants: Option<u32>,
}

impl Default for StageUi {
    fn default() -> Self {
        StageUi {
            show_progress_bar: true,
            wait_for_all_participants: false,
            auto_advance_timer_seconds: None,
            min_participants: None,
        }
    }
}

pub(crate) fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    TermsOfService,
    Info,
    Profile,
    GroupChat,
    PrivateChat,
    Transfer,
    Survey,
    SurveyPerParticipant,
    Comprehension,
    RankingElection,
    Reveal,
    Payout,
    RoleAssignment,
}

impl StageKind {
    /// Kinds whose content is shared by the cohort and may wait for everyone.
    pub fn is_group(self) -> bool {
        matches!(
            self,
            StageKind::GroupChat | StageKind::RankingElection | StageKind::Reveal | StageKind::Transfer
        )
    }

    pub fn is_survey(self) -> bool {
        matches!(
            self,
            StageKind::Survey | StageKind::SurveyPerParticipant | StageKind::Comprehension
        )
    }

    pub fn is_chat(self) -> bool {
        matches!(self, StageKind::GroupChat | StageKind::PrivateChat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "kindParams")]
pub enum StageParams {
    TermsOfService,
    Info,
    Profile(ProfileStageParams),
    GroupChat(ChatStageParams),
    PrivateChat(ChatStageParams),
    Transfer(TransferStageParams),
    Survey(SurveyStageParams),
    SurveyPerParticipant(SurveyStageParams),
    Comprehension(SurveyStageParams),
    RankingElection(ElectionStageParams),
    Reveal(RevealStageParams),
    Payout(PayoutStageParams),
    RoleAssignment(RoleAssignmentParams),
}

impl StageParams {
    pub fn kind(&self) -> StageKind {
        match self {
            StageParams::TermsOfService => StageKind::TermsOfService,
            StageParams::Info => StageKind::Info,
            StageParams::Profile(_) => StageKind::Profile,
            StageParams::GroupChat(_) => StageKind::GroupChat,
            StageParams::PrivateChat(_) => StageKind::PrivateChat,
            StageParams::Transfer(_) => StageKind::Transfer,
            StageParams::Survey(_) => StageKind::Survey,
            StageParams::SurveyPerParticipant(_) => StageKind::SurveyPerParticipant,
            StageParams::Comprehension(_) => StageKind::Comprehension,
            StageParams::RankingElection(_) => StageKind::RankingElection,
            StageParams::Reveal(_) => StageKind::Reveal,
            StageParams::Payout(_) => StageKind::Payout,
            StageParams::RoleAssignment(_) => StageKind::RoleAssignment,
        }
    }

    pub fn survey(&self) -> Option<&SurveyStageParams> {
        match self {
            StageParams::Survey(s) | StageParams::SurveyPerParticipant(s) | StageParams::Comprehension(s) => Some(s),
            _ => None,
        }
    }

    pub fn chat(&self) -> Option<&ChatStageParams> {
        match self {
            StageParams::GroupChat(c) | StageParams::PrivateChat(c) => Some(c),
            _ => None,
        }
    }
}

impl StageConfig {
    pub fn kind(&self) -> StageKind {
        self.params.kind()
    }

    /// Every other stage this stage reads from, with the field path that names it.
    pub fn references(&self) -> Vec<(String, &StageId)> {
        let mut out = Vec::new();
        match &self.params {
            StageParams::Transfer(t) => {
                for (i, c) in t.composition.iter().enumerate() {
                    out.push((format!("kindParams.composition[{i}].surveyStageId"), &c.survey_stage_id));
                }
            }
            StageParams::Reveal(r) => {
                for (i, s) in r.sources.iter().enumerate() {
                    out.push((format!("kindParams.sources[{i}].stageId"), &s.stage_id));
                }
            }
            StageParams::Payout(p) => {
                for (i, item) in p.items.iter().enumerate() {
                    match item {
                        PayoutItem::FixedCompletion { stage_ids, .. } => {
                            for (j, s) in stage_ids.iter().enumerate() {
                                out.push((format!("kindParams.items[{i}].stageIds[{j}]"), s));
                            }
                        }
                        PayoutItem::QuizPerformance { survey_stage_id, .. } => {
                            out.push((format!("kindParams.items[{i}].surveyStageId"), survey_stage_id));
                        }
                        PayoutItem::RandomCondition { .. } => {}
                        PayoutItem::LeaderPerformance {
                            election_stage_id,
                            survey_stage_id,
                            ..
                        } => {
                            out.push((format!("kindParams.items[{i}].electionStageId"), election_stage_id));
                            out.push((format!("kindParams.items[{i}].surveyStageId"), survey_stage_id));
                        }
                    }
                }
            }
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProfileMode {
    SelfChosen,
    AssignedPseudonym,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PseudonymSet {
    Animal,
    Nature,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProfileStageParams {
    pub mode: ProfileMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonym_set: Option<PseudonymSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum QuestionKind {
    Freeform,
    MultipleChoice,
    Checkbox,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub min: i64,
    pub max: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SurveyQuestion {
    pub id: QuestionId,
    pub kind: QuestionKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<ChoiceOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_bounds: Option<ScaleBounds>,
    /// Required on comprehension questions; optional elsewhere (quiz scoring).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_answer: Option<AnswerValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SurveyStageParams {
    pub questions: Vec<SurveyQuestion>,
    /// Per-participant surveys only: skip questions about oneself.
    #[serde(default)]
    pub exclude_self: bool,
}

impl SurveyStageParams {
    pub fn question(&self, id: &QuestionId) -> Option<&SurveyQuestion> {
        self.questions.iter().find(|q| &q.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SelectionMode {
    /// Winner drawn with probability proportional to words-per-minute.
    #[default]
    WeightedByWpm,
    /// Shortest typing delay wins; ties go to the smallest agent id.
    FastestWins,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatStageParams {
    #[serde(default)]
    pub mediators: Vec<AgentId>,
    /// When false, agent messages are delivered at decision time.
    #[serde(default = "default_true")]
    pub wpm_throttling: bool,
    #[serde(default)]
    pub selection: SelectionMode,
    /// Human end-chat votes needed to close the chat; defaults to every
    /// non-terminal human member.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_quorum: Option<u32>,
}

impl Default for ChatStageParams {
    fn default() -> Self {
        ChatStageParams {
            mediators: Vec::new(),
            wpm_throttling: true,
            selection: SelectionMode::default(),
            end_quorum: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TransferStrategy {
    ByArrivalOrder,
    ByAttributeComposition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompositionRule {
    pub survey_stage_id: StageId,
    pub question_id: QuestionId,
    pub required_counts: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferStageParams {
    pub strategy: TransferStrategy,
    pub target_cohort_size: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub composition: Vec<CompositionRule>,
    pub timeout_seconds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ElectionMode {
    /// Participants rank each other.
    Peers,
    /// Participants rank a fixed item list.
    Items,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ElectionStageParams {
    pub mode: ElectionMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<String>,
    #[serde(default)]
    pub allow_self_vote: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RevealView {
    ElectionWinner,
    IndividualResponses,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RevealSource {
    pub stage_id: StageId,
    pub show: RevealView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealStageParams {
    pub sources: Vec<RevealSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DrawScope {
    /// One draw shared by every cohort member.
    Cohort,
    Participant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomOutcome {
    pub amount: Money,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum PayoutItem {
    /// Paid once when every listed stage is completed.
    FixedCompletion { amount: Money, stage_ids: Vec<StageId> },
    /// Paid per correct answer in a scored survey.
    QuizPerformance { amount: Money, survey_stage_id: StageId },
    RandomCondition { outcomes: Vec<RandomOutcome>, scope: DrawScope },
    /// Paid per correct answer the elected leader gave in a survey.
    LeaderPerformance {
        amount: Money,
        election_stage_id: StageId,
        survey_stage_id: StageId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PayoutStageParams {
    #[serde(default = "default_currency")]
    pub currency_unit: String,
    #[serde(default)]
    pub base_pay: Money,
    #[serde(default)]
    pub items: Vec<PayoutItem>,
}

fn default_currency() -> String {
    "USD".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignmentParams {
    /// Role names dealt out after a seeded shuffle of the cohort; members
    /// beyond the list length cycle through it again.
    pub roles: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_params_round_trip_through_flatten() {
        let stage = StageConfig {
            id: "s".into(),
            title: "Profile".into(),
            markdown_body: String::new(),
            ui: StageUi::default(),
            params: StageParams::Profile(ProfileStageParams {
                mode: ProfileMode::AssignedPseudonym,
                pseudonym_set: Some(PseudonymSet::Animal),
            }),
        };
        let v = serde_json::to_value(&stage).unwrap();
        assert_eq!(v["kind"], "Profile");
        assert_eq!(v["kindParams"]["pseudonymSet"], "animal");
        let back: StageConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, stage);

        let info: StageConfig =
            serde_json::from_str(r#"{"id":"i","title":"Info","kind":"Info"}"#).unwrap();
        assert_eq!(info.kind(), StageKind::Info);
    }

    #[test]
    fn payout_item_fields_are_camel_case() {
        let item = PayoutItem::LeaderPerformance {
            amount: Money(50),
            election_stage_id: "e".into(),
            survey_stage_id: "s".into(),
        };
        let v = serde_json::to_value(&item).unwrap();
        assert_eq!(v["type"], "leaderPerformance");
        assert_eq!(v["electionStageId"], "e");
    }
}
