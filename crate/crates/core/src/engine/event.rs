use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::handraise::{AgentCallLog, DeliverySchedule};
use crate::agent::spec::AgentSpec;
use crate::chat::ChatMessage;
use crate::ids::{AgentId, CohortId, ExperimenterId, PrivateIdDigest, PublicId, QuestionId, StageId};
use crate::model::answer::{AnswerContent, AnswerRecord, Profile};
use crate::model::config::{ExperimentConfig, Metadata};
use crate::model::stage::{PseudonymSet, StageConfig};
use crate::presence::{Alert, AttentionCheck, CheckState};
use crate::tally::{ElectionResult, PayoutRow, RevealSnapshot};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Actor {
    System,
    Participant { public_id: PublicId },
    Experimenter { id: ExperimenterId },
    /// An experimenter acting through a participant's view.
    OnBehalf {
        experimenter: ExperimenterId,
        public_id: PublicId,
    },
    Agent { agent_id: AgentId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CompletionReason {
    Finished,
    /// Left a lobby unmatched after the transfer timeout.
    LobbyTimeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OfferState {
    Pending,
    Accepted,
    Declined,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferOffer {
    pub id: String,
    pub participant_public_id: PublicId,
    pub from_cohort_id: CohortId,
    pub to_cohort_id: CohortId,
    pub expires_at: Timestamp,
    pub state: OfferState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Event {
    ExperimentCreated {
        config: ExperimentConfig,
        seed: u64,
    },
    MetadataEdited {
        metadata: Metadata,
    },
    StagesEdited {
        stages: Vec<StageConfig>,
    },
    AgentSpecEdited {
        spec: AgentSpec,
    },
    AgentPaused {
        agent_id: AgentId,
        paused: bool,
    },
    CohortCreated {
        cohort_id: CohortId,
        name: String,
    },
    CohortLocked {
        cohort_id: CohortId,
    },
    ParticipantCreated {
        public_id: PublicId,
        private_id_digest: PrivateIdDigest,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        external_id: Option<String>,
        cohort_id: CohortId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent_id: Option<AgentId>,
    },
    ParticipantJoined {
        public_id: PublicId,
    },
    ProfileSet {
        public_id: PublicId,
        profile: Profile,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pseudonym_set: Option<PseudonymSet>,
    },
    DraftSaved {
        public_id: PublicId,
        stage_id: StageId,
        content: AnswerContent,
    },
    AnswerSubmitted {
        public_id: PublicId,
        answer: AnswerRecord,
    },
    ComprehensionFailed {
        public_id: PublicId,
        stage_id: StageId,
        attempt: u32,
        per_question: BTreeMap<QuestionId, bool>,
    },
    Advanced {
        public_id: PublicId,
        from: usize,
        to: usize,
        timed_out: bool,
    },
    ParticipantCompleted {
        public_id: PublicId,
        reason: CompletionReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        redirect_url: Option<String>,
    },
    GateOpened {
        stage_id: StageId,
    },
    /// `stage_id` on chat events names the chat: the stage id for group
    /// chats, `<stage>~<publicId>` for private chats.
    ChatMessagePosted {
        stage_id: StageId,
        message: ChatMessage,
    },
    EndChatVoted {
        stage_id: StageId,
        public_id: PublicId,
    },
    ChatEnded {
        stage_id: StageId,
    },
    AgentRoundStarted {
        stage_id: StageId,
        round_id: u64,
        trigger_message_id: String,
    },
    AgentCallLogged {
        log: AgentCallLog,
    },
    AgentRoundResolved {
        stage_id: StageId,
        round_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        winner: Option<DeliverySchedule>,
        readiness: BTreeMap<AgentId, bool>,
    },
    AgentDraftDelivered {
        stage_id: StageId,
        message: ChatMessage,
    },
    AgentDraftDropped {
        stage_id: StageId,
        agent_id: AgentId,
        reason: String,
    },
    AgentTaskStarted {
        public_id: PublicId,
        stage_id: StageId,
        task_id: u64,
    },
    AgentStalled {
        public_id: PublicId,
        stage_id: StageId,
        reason: String,
    },
    ElectionTallied {
        stage_id: StageId,
        result: ElectionResult,
        complete: bool,
    },
    RevealBuilt {
        snapshot: RevealSnapshot,
    },
    PayoutComputed {
        public_id: PublicId,
        row: PayoutRow,
    },
    RoleAssigned {
        stage_id: StageId,
        public_id: PublicId,
        role: String,
    },
    TransferOffered {
        offer: TransferOffer,
    },
    TransferResolved {
        offer_id: String,
        state: OfferState,
    },
    LobbyMatched {
        from: CohortId,
        to: CohortId,
        members: Vec<PublicId>,
    },
    ParticipantBooted {
        public_id: PublicId,
    },
    AttentionCheckSent {
        check: AttentionCheck,
    },
    AttentionCheckResolved {
        check_id: String,
        state: CheckState,
    },
    AlertRaised {
        alert: Alert,
    },
    AlertResolved {
        alert_id: String,
        response: String,
    },
    FacilitatorMessage {
        public_id: PublicId,
        text: String,
    },
    /// Notification for facilitators that needs no state change.
    FacilitatorNotice {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        public_id: Option<PublicId>,
        message: String,
    },
}

impl Event {
    /// The `kind` discriminator as written in the log.
    pub fn kind(&self) -> &'static str {
        match self {
            Event::ExperimentCreated { .. } => "experimentCreated",
            Event::MetadataEdited { .. } => "metadataEdited",
            Event::StagesEdited { .. } => "stagesEdited",
            Event::AgentSpecEdited { .. } => "agentSpecEdited",
            Event::AgentPaused { .. } => "agentPaused",
            Event::CohortCreated { .. } => "cohortCreated",
            Event::CohortLocked { .. } => "cohortLocked",
            Event::ParticipantCreated { .. } => "participantCreated",
            Event::ParticipantJoined { .. } => "participantJoined",
            Event::ProfileSet { .. } => "profileSet",
            Event::DraftSaved { .. } => "draftSaved",
            Event::AnswerSubmitted { .. } => "answerSubmitted",
            Event::ComprehensionFailed { .. } => "comprehensionFailed",
            Event::Advanced { .. } => "advanced",
            Event::ParticipantCompleted { .. } => "participantCompleted",
            Event::GateOpened { .. } => "gateOpened",
            Event::ChatMessagePosted { .. } => "chatMessagePosted",
            Event::EndChatVoted { .. } => "endChatVoted",
            Event::ChatEnded { .. } => "chatEnded",
            Event::AgentRoundStarted { .. } => "agentRoundStarted",
            Event::AgentCallLogged { .. } => "agentCallLogged",
            Event::AgentRoundResolved { .. } => "agentRoundResolved",
            Event::AgentDraftDelivered { .. } => "agentDraftDelivered",
            Event::AgentDraftDropped { .. } => "agentDraftDropped",
            Event::AgentTaskStarted { .. } => "agentTaskStarted",
            Event::AgentStalled { .. } => "agentStalled",
            Event::ElectionTallied { .. } => "electionTallied",
            Event::RevealBuilt { .. } => "revealBuilt",
            Event::PayoutComputed { .. } => "payoutComputed",
            Event::RoleAssigned { .. } => "roleAssigned",
            Event::TransferOffered { .. } => "transferOffered",
            Event::TransferResolved { .. } => "transferResolved",
            Event::LobbyMatched { .. } => "lobbyMatched",
            Event::ParticipantBooted { .. } => "participantBooted",
            Event::AttentionCheckSent { .. } => "attentionCheckSent",
            Event::AttentionCheckResolved { .. } => "attentionCheckResolved",
            Event::AlertRaised { .. } => "alertRaised",
            Event::AlertResolved { .. } => "alertResolved",
            Event::FacilitatorMessage { .. } => "facilitatorMessage",
            Event::FacilitatorNotice { .. } => "facilitatorNotice",
        }
    }
}

/// One appended state change. `index` orders the whole experiment log;
/// `sequence` is gapless within the record's stream (a cohort, or the
/// experiment itself when `cohort_id` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventRecord {
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_id: Option<CohortId>,
    pub sequence: u64,
    pub timestamp: Timestamp,
    pub actor: Actor,
    #[serde(flatten)]
    pub event: Event,
}
