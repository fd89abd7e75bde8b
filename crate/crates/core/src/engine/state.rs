//! The experiment aggregate. `apply` is the only way state changes, so
//! replaying a log prefix always reproduces the state at that point.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::handraise::{AgentCallLog, DeliverySchedule};
use crate::chat::{AuthorKind, ChatMessage};
use crate::engine::event::{CompletionReason, Event, EventRecord, OfferState, TransferOffer};
use crate::ids::{AgentId, CohortId, PrivateIdDigest, PublicId, StageId};
use crate::model::answer::{AnswerContent, AnswerRecord, Profile};
use crate::model::config::ExperimentConfig;
use crate::model::stage::{PseudonymSet, StageConfig, StageKind};
use crate::presence::{Alert, AttentionCheck, AttentionStats, CheckState};
use crate::tally::{ElectionResult, PayoutRow, RevealSnapshot};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ParticipantStatus {
    Active,
    TransferPending,
    Booted,
    Completed,
}

impl ParticipantStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, ParticipantStatus::Booted | ParticipantStatus::Completed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParticipantStatus::Active => "active",
            ParticipantStatus::TransferPending => "transferPending",
            ParticipantStatus::Booted => "booted",
            ParticipantStatus::Completed => "completed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParticipantRecord {
    pub public_id: PublicId,
    pub private_id_digest: PrivateIdDigest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    /// Set when the profile is an assigned pseudonym.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonym_set: Option<PseudonymSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_id: Option<String>,
    /// Present for agent participants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<AgentId>,
    pub current_stage_index: usize,
    pub stage_answers: BTreeMap<StageId, AnswerRecord>,
    pub status: ParticipantStatus,
    pub cohort_id: CohortId,
    pub joined: bool,
    pub created_at: Timestamp,
    /// When the participant reached each stage index.
    pub arrived_at: BTreeMap<usize, Timestamp>,
    pub drafts: BTreeMap<StageId, AnswerContent>,
    pub comprehension_attempts: BTreeMap<StageId, u32>,
    pub roles: BTreeMap<StageId, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_reason: Option<CompletionReason>,
    /// Agent participants: the provider task in progress.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_task: Option<u64>,
    /// Agent participants: gave up on the current stage.
    #[serde(default)]
    pub stalled: bool,
}

impl ParticipantRecord {
    pub fn display_name(&self) -> String {
        match &self.profile {
            Some(p) if !p.display_name.is_empty() => p.display_name.clone(),
            _ => self.public_id.to_string(),
        }
    }

    pub fn is_agent(&self) -> bool {
        self.agent_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Slot {
    Idle,
    /// A hand-raising round is waiting on provider calls.
    Calling { round_id: u64 },
    /// The winner is "typing" until `schedule.deliver_at`.
    Typing { round_id: u64, schedule: DeliverySchedule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatState {
    pub messages: Vec<ChatMessage>,
    pub end_votes: BTreeSet<PublicId>,
    /// Latest readyToEndChat per agent.
    pub agent_ready: BTreeMap<AgentId, bool>,
    pub ended: bool,
    pub slot: Slot,
    /// A human spoke since the last round started.
    pub pending_round: bool,
    pub rounds: u64,
}

impl Default for ChatState {
    fn default() -> Self {
        ChatState {
            messages: Vec::new(),
            end_votes: BTreeSet::new(),
            agent_ready: BTreeMap::new(),
            ended: false,
            slot: Slot::Idle,
            pending_round: false,
            rounds: 0,
        }
    }
}

impl ChatState {
    pub fn last_human_message(&self) -> Option<&ChatMessage> {
        self.messages.iter().rev().find(|m| m.author_kind == AuthorKind::Participant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ElectionState {
    pub result: ElectionResult,
    /// Every counted voter has a ballot in.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Cohort {
    pub id: CohortId,
    pub name: String,
    pub member_public_ids: Vec<PublicId>,
    pub locked: bool,
    pub created_at: Timestamp,
    /// Wait-for-all gates that have opened, with the time they opened.
    pub gates: BTreeMap<StageId, Timestamp>,
    pub chats: BTreeMap<StageId, ChatState>,
    pub elections: BTreeMap<StageId, ElectionState>,
    pub reveals: BTreeMap<StageId, RevealSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FacilitatorMessage {
    pub public_id: PublicId,
    pub text: String,
    pub sent_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_id: Option<PublicId>,
    pub message: String,
    pub raised_at: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Counters {
    pub messages: u64,
    pub offers: u64,
    pub checks: u64,
    pub alerts: u64,
    pub tasks: u64,
    pub cohorts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub created_at: Timestamp,
    /// Number of records applied, including the creation record.
    pub applied: u64,
    pub cohorts: BTreeMap<CohortId, Cohort>,
    pub participants: BTreeMap<PublicId, ParticipantRecord>,
    pub digests: BTreeMap<PrivateIdDigest, PublicId>,
    pub offers: BTreeMap<String, TransferOffer>,
    pub attention_checks: BTreeMap<String, AttentionCheck>,
    pub alerts: BTreeMap<String, Alert>,
    pub notices: Vec<Notice>,
    pub facilitator_messages: Vec<FacilitatorMessage>,
    pub paused_agents: BTreeSet<AgentId>,
    pub call_logs: Vec<AgentCallLog>,
    pub payouts: BTreeMap<PublicId, PayoutRow>,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("first record must create the experiment")]
    MissingGenesis,
    #[error("record {found} out of order, expected {expected}")]
    OutOfOrder { expected: u64, found: u64 },
}

impl ExperimentState {
    pub fn genesis(rec: &EventRecord) -> Result<Self, ReplayError> {
        let Event::ExperimentCreated { config, seed } = &rec.event else {
            return Err(ReplayError::MissingGenesis);
        };
        Ok(ExperimentState {
            config: config.clone(),
            seed: *seed,
            created_at: rec.timestamp,
            applied: 1,
            cohorts: BTreeMap::new(),
            participants: BTreeMap::new(),
            digests: BTreeMap::new(),
            offers: BTreeMap::new(),
            attention_checks: BTreeMap::new(),
            alerts: BTreeMap::new(),
            notices: Vec::new(),
            facilitator_messages: Vec::new(),
            paused_agents: BTreeSet::new(),
            call_logs: Vec::new(),
            payouts: BTreeMap::new(),
            counters: Counters::default(),
        })
    }

    pub fn replay(records: &[EventRecord]) -> Result<Self, ReplayError> {
        let first = records.first().ok_or(ReplayError::Empty)?;
        let mut state = Self::genesis(first)?;
        state.apply_all(&records[1..])?;
        Ok(state)
    }

    /// Applies records that must continue exactly where this state ends.
    pub fn apply_all(&mut self, records: &[EventRecord]) -> Result<(), ReplayError> {
        for rec in records {
            if rec.index != self.applied {
                return Err(ReplayError::OutOfOrder {
                    expected: self.applied,
                    found: rec.index,
                });
            }
            self.apply(rec);
        }
        Ok(())
    }

    pub fn stages(&self) -> &[StageConfig] {
        &self.config.stages
    }

    pub fn stage_at(&self, index: usize) -> Option<&StageConfig> {
        self.config.stages.get(index)
    }

    pub fn participant(&self, id: &PublicId) -> Option<&ParticipantRecord> {
        self.participants.get(id)
    }

    pub fn cohort(&self, id: &CohortId) -> Option<&Cohort> {
        self.cohorts.get(id)
    }

    pub fn members<'a>(&'a self, cohort: &'a Cohort) -> impl Iterator<Item = &'a ParticipantRecord> + 'a {
        cohort.member_public_ids.iter().filter_map(|id| self.participants.get(id))
    }

    /// Members that still count for gates.
    pub fn live_members<'a>(&'a self, cohort: &'a Cohort) -> impl Iterator<Item = &'a ParticipantRecord> + 'a {
        self.members(cohort).filter(|p| !p.status.is_terminal())
    }

    /// Members that have not been booted.
    pub fn counted_members<'a>(&'a self, cohort: &'a Cohort) -> impl Iterator<Item = &'a ParticipantRecord> + 'a {
        self.members(cohort).filter(|p| p.status != ParticipantStatus::Booted)
    }

    pub fn pending_offer_for(&self, id: &PublicId) -> Option<&TransferOffer> {
        self.offers
            .values()
            .find(|o| &o.participant_public_id == id && o.state == OfferState::Pending)
    }

    pub fn pending_check_for(&self, id: &PublicId) -> Option<&AttentionCheck> {
        self.attention_checks
            .values()
            .find(|c| &c.participant_public_id == id && c.state == CheckState::Pending)
    }

    pub fn attention_stats(&self) -> AttentionStats {
        let mut s = AttentionStats::default();
        for c in self.attention_checks.values() {
            s.sent += 1;
            match c.state {
                CheckState::Pending => s.pending += 1,
                CheckState::Passed => s.passed += 1,
                CheckState::Failed => s.failed += 1,
            }
        }
        s
    }

    fn arrive(p: &mut ParticipantRecord, index: usize, at: Timestamp) {
        p.current_stage_index = index;
        p.arrived_at.entry(index).or_insert(at);
    }

    /// Moves a participant into `to`, stepping past a transfer stage they
    /// were waiting at.
    fn move_member(&mut self, id: &PublicId, to: &CohortId, at: Timestamp) {
        let Some(p) = self.participants.get(id) else { return };
        let from = p.cohort_id.clone();
        if let Some(c) = self.cohorts.get_mut(&from) {
            c.member_public_ids.retain(|m| m != id);
        }
        if let Some(c) = self.cohorts.get_mut(to) {
            if !c.member_public_ids.contains(id) {
                c.member_public_ids.push(id.clone());
            }
        }
        let at_transfer = self
            .config
            .stages
            .get(p.current_stage_index)
            .is_some_and(|s| s.kind() == StageKind::Transfer);
        let p = self.participants.get_mut(id).expect("checked above");
        p.cohort_id = to.clone();
        if p.status == ParticipantStatus::TransferPending {
            p.status = ParticipantStatus::Active;
        }
        if at_transfer {
            let next = p.current_stage_index + 1;
            Self::arrive(p, next, at);
        }
    }

    fn chat_mut(&mut self, cohort: &Option<CohortId>, stage: &StageId) -> Option<&mut ChatState> {
        let c = self.cohorts.get_mut(cohort.as_ref()?)?;
        Some(c.chats.entry(stage.clone()).or_default())
    }

    pub fn apply(&mut self, rec: &EventRecord) {
        self.applied = rec.index + 1;
        let at = rec.timestamp;
        match &rec.event {
            Event::ExperimentCreated { .. } => {}
            Event::MetadataEdited { metadata } => self.config.metadata = metadata.clone(),
            Event::StagesEdited { stages } => self.config.stages = stages.clone(),
            Event::AgentSpecEdited { spec } => {
                match self.config.agent_templates.iter_mut().find(|a| a.id == spec.id) {
                    Some(a) => *a = spec.clone(),
                    None => self.config.agent_templates.push(spec.clone()),
                }
            }
            Event::AgentPaused { agent_id, paused } => {
                if *paused {
                    self.paused_agents.insert(agent_id.clone());
                } else {
                    self.paused_agents.remove(agent_id);
                    // Resuming retries stalled agent participants.
                    for p in self.participants.values_mut() {
                        if p.agent_id.as_ref() == Some(agent_id) {
                            p.stalled = false;
                        }
                    }
                }
            }
            Event::CohortCreated { cohort_id, name } => {
                self.counters.cohorts += 1;
                self.cohorts.insert(
                    cohort_id.clone(),
                    Cohort {
                        id: cohort_id.clone(),
                        name: name.clone(),
                        member_public_ids: Vec::new(),
                        locked: false,
                        created_at: at,
                        gates: BTreeMap::new(),
                        chats: BTreeMap::new(),
                        elections: BTreeMap::new(),
                        reveals: BTreeMap::new(),
                    },
                );
            }
            Event::CohortLocked { cohort_id } => {
                if let Some(c) = self.cohorts.get_mut(cohort_id) {
                    c.locked = true;
                }
            }
            Event::ParticipantCreated {
                public_id,
                private_id_digest,
                external_id,
                cohort_id,
                agent_id,
            } => {
                self.digests.insert(private_id_digest.clone(), public_id.clone());
                if let Some(c) = self.cohorts.get_mut(cohort_id) {
                    c.member_public_ids.push(public_id.clone());
                }
                self.participants.insert(
                    public_id.clone(),
                    ParticipantRecord {
                        public_id: public_id.clone(),
                        private_id_digest: private_id_digest.clone(),
                        profile: None,
                        pseudonym_set: None,
                        external_id: external_id.clone(),
                        agent_id: agent_id.clone(),
                        current_stage_index: 0,
                        stage_answers: BTreeMap::new(),
                        status: ParticipantStatus::Active,
                        cohort_id: cohort_id.clone(),
                        joined: false,
                        created_at: at,
                        arrived_at: BTreeMap::new(),
                        drafts: BTreeMap::new(),
                        comprehension_attempts: BTreeMap::new(),
                        roles: BTreeMap::new(),
                        completion_reason: None,
                        pending_task: None,
                        stalled: false,
                    },
                );
            }
            Event::ParticipantJoined { public_id } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.joined = true;
                    p.arrived_at.entry(p.current_stage_index).or_insert(at);
                }
            }
            Event::ProfileSet {
                public_id,
                profile,
                pseudonym_set,
            } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.profile = Some(profile.clone());
                    p.pseudonym_set = *pseudonym_set;
                }
            }
            Event::DraftSaved {
                public_id,
                stage_id,
                content,
            } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.drafts.insert(stage_id.clone(), content.clone());
                }
            }
            Event::AnswerSubmitted { public_id, answer } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    if let AnswerContent::Profile { profile } = &answer.content {
                        p.profile = Some(profile.clone());
                        p.pseudonym_set = None;
                    }
                    p.drafts.remove(&answer.stage_id);
                    p.stage_answers.insert(answer.stage_id.clone(), answer.clone());
                }
            }
            Event::ComprehensionFailed {
                public_id,
                stage_id,
                attempt,
                ..
            } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.comprehension_attempts.insert(stage_id.clone(), *attempt);
                    p.pending_task = None;
                }
            }
            Event::Advanced { public_id, to, .. } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.pending_task = None;
                    p.stalled = false;
                    Self::arrive(p, *to, at);
                }
            }
            Event::ParticipantCompleted { public_id, reason, .. } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.status = ParticipantStatus::Completed;
                    p.completion_reason = Some(*reason);
                    p.pending_task = None;
                }
            }
            Event::GateOpened { stage_id } => {
                if let Some(c) = rec.cohort_id.as_ref().and_then(|c| self.cohorts.get_mut(c)) {
                    c.gates.entry(stage_id.clone()).or_insert(at);
                }
            }
            Event::ChatMessagePosted { stage_id, message } => {
                self.counters.messages += 1;
                let cohort = Some(message.cohort_id.clone());
                if let Some(chat) = self.chat_mut(&cohort, stage_id) {
                    if message.author_kind == AuthorKind::Participant && !chat.ended {
                        chat.pending_round = true;
                    }
                    chat.messages.push(message.clone());
                }
            }
            Event::EndChatVoted { stage_id, public_id } => {
                if let Some(chat) = self.chat_mut(&rec.cohort_id, stage_id) {
                    chat.end_votes.insert(public_id.clone());
                }
            }
            Event::ChatEnded { stage_id } => {
                if let Some(chat) = self.chat_mut(&rec.cohort_id, stage_id) {
                    chat.ended = true;
                    chat.pending_round = false;
                    if matches!(chat.slot, Slot::Typing { .. }) {
                        chat.slot = Slot::Idle;
                    }
                }
            }
            Event::AgentRoundStarted { stage_id, round_id, .. } => {
                if let Some(chat) = self.chat_mut(&rec.cohort_id, stage_id) {
                    chat.slot = Slot::Calling { round_id: *round_id };
                    chat.pending_round = false;
                    chat.rounds = chat.rounds.max(*round_id);
                }
            }
            Event::AgentCallLogged { log } => self.call_logs.push(log.clone()),
            Event::AgentRoundResolved {
                stage_id,
                round_id,
                winner,
                readiness,
            } => {
                if let Some(chat) = self.chat_mut(&rec.cohort_id, stage_id) {
                    for (a, r) in readiness {
                        chat.agent_ready.insert(a.clone(), *r);
                    }
                    chat.slot = match winner {
                        Some(w) if w.word_count > 0 && !chat.ended => Slot::Typing {
                            round_id: *round_id,
                            schedule: w.clone(),
                        },
                        _ => Slot::Idle,
                    };
                }
            }
            Event::AgentDraftDelivered { stage_id, message } => {
                self.counters.messages += 1;
                if let Some(chat) = self.chat_mut(&rec.cohort_id, stage_id) {
                    chat.messages.push(message.clone());
                    chat.slot = Slot::Idle;
                }
            }
            Event::AgentDraftDropped { stage_id, .. } => {
                if let Some(chat) = self.chat_mut(&rec.cohort_id, stage_id) {
                    chat.slot = Slot::Idle;
                }
            }
            Event::AgentTaskStarted { public_id, task_id, .. } => {
                self.counters.tasks = self.counters.tasks.max(*task_id);
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.pending_task = Some(*task_id);
                }
            }
            Event::AgentStalled { public_id, .. } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.pending_task = None;
                    p.stalled = true;
                }
            }
            Event::ElectionTallied {
                stage_id,
                result,
                complete,
            } => {
                if let Some(c) = rec.cohort_id.as_ref().and_then(|c| self.cohorts.get_mut(c)) {
                    c.elections.insert(
                        stage_id.clone(),
                        ElectionState {
                            result: result.clone(),
                            complete: *complete,
                        },
                    );
                }
            }
            Event::RevealBuilt { snapshot } => {
                if let Some(c) = rec.cohort_id.as_ref().and_then(|c| self.cohorts.get_mut(c)) {
                    c.reveals.entry(snapshot.stage_id.clone()).or_insert_with(|| snapshot.clone());
                }
            }
            Event::PayoutComputed { public_id, row } => {
                self.payouts.insert(public_id.clone(), row.clone());
            }
            Event::RoleAssigned {
                stage_id,
                public_id,
                role,
            } => {
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.roles.insert(stage_id.clone(), role.clone());
                }
            }
            Event::TransferOffered { offer } => {
                self.counters.offers += 1;
                if let Some(p) = self.participants.get_mut(&offer.participant_public_id) {
                    p.status = ParticipantStatus::TransferPending;
                }
                self.offers.insert(offer.id.clone(), offer.clone());
            }
            Event::TransferResolved { offer_id, state } => {
                let Some(offer) = self.offers.get_mut(offer_id) else { return };
                offer.state = *state;
                let offer = offer.clone();
                if *state == OfferState::Accepted {
                    self.move_member(&offer.participant_public_id, &offer.to_cohort_id, at);
                } else if let Some(p) = self.participants.get_mut(&offer.participant_public_id) {
                    if p.status == ParticipantStatus::TransferPending {
                        p.status = ParticipantStatus::Active;
                    }
                }
            }
            Event::LobbyMatched { to, members, .. } => {
                for m in members {
                    self.move_member(m, to, at);
                }
            }
            Event::ParticipantBooted { public_id } => {
                for o in self.offers.values_mut() {
                    if &o.participant_public_id == public_id && o.state == OfferState::Pending {
                        o.state = OfferState::Expired;
                    }
                }
                if let Some(p) = self.participants.get_mut(public_id) {
                    p.status = ParticipantStatus::Booted;
                    p.pending_task = None;
                }
            }
            Event::AttentionCheckSent { check } => {
                self.counters.checks += 1;
                self.attention_checks.insert(check.id.clone(), check.clone());
            }
            Event::AttentionCheckResolved { check_id, state } => {
                if let Some(c) = self.attention_checks.get_mut(check_id) {
                    c.state = *state;
                }
            }
            Event::AlertRaised { alert } => {
                self.counters.alerts += 1;
                self.alerts.insert(alert.id.clone(), alert.clone());
            }
            Event::AlertResolved { alert_id, response } => {
                if let Some(a) = self.alerts.get_mut(alert_id) {
                    a.resolved_at = Some(at);
                    a.facilitator_response = Some(response.clone());
                }
            }
            Event::FacilitatorMessage { public_id, text } => self.facilitator_messages.push(FacilitatorMessage {
                public_id: public_id.clone(),
                text: text.clone(),
                sent_at: at,
            }),
            Event::FacilitatorNotice { public_id, message } => self.notices.push(Notice {
                public_id: public_id.clone(),
                message: message.clone(),
                raised_at: at,
            }),
        }
    }
}
