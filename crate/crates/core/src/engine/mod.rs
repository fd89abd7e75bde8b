//! Command processing for one experiment. Every command validates against
//! the current state, appends events, and then runs derived rules (gates,
//! tallies, agent progress, lobby matching) to a fixpoint.
//!
//! Provider calls never run inside the engine. Rounds and agent stage tasks
//! are handed out as [`Job`]s and their results fed back, so the same engine
//! drives the wall-clock server and the virtual-clock simulator.

pub mod event;
pub mod rules;
pub mod state;
pub mod views;

use std::collections::{BTreeMap, BTreeSet};

use crate::agent::handraise::{
    AgentCallLog, AgentStageError, RoundOutcome, RoundRequest, StageAction, StageTask, MAX_STAGE_ATTEMPTS,
};
use crate::agent::spec::{AgentSpec, PromptItem};
use crate::chat::{AuthorKind, ChatMessage};
use crate::cohort::{match_lobby, Waiting};
use crate::ids::{derive_seed, seeded_rng, AgentId, CohortId, ExperimenterId, IdGen, PrivateId, PrivateIdDigest, PublicId, QuestionId, StageId};
use crate::model::answer::{AnswerContent, AnswerRecord, Profile};
use crate::model::config::{ExperimentConfig, Metadata};
use crate::model::pseudonyms;
use crate::model::stage::{ProfileMode, StageConfig, StageKind, StageParams};
use crate::model::validate::validate_experiment_config;
use crate::presence::{AttentionCheck, CheckState, PresenceState, PresenceStore};
use crate::store::log::{EventLog, EventSink, StorageError};
use crate::tally::{build_reveal, compute_payout, PayoutMode, Tally};
use crate::time::Timestamp;

pub use event::{Actor, CompletionReason, Event, EventRecord, OfferState, TransferOffer};
pub use state::{ChatState, Cohort, ExperimentState, ParticipantRecord, ParticipantStatus, ReplayError, Slot};
use rules::AnswerProblem;
use views::{PayoutView, RevealView};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("unknown participant '{0}'")]
    UnknownParticipant(PublicId),
    #[error("unknown private id")]
    UnknownPrivateId,
    #[error("unknown cohort '{0}'")]
    UnknownCohort(CohortId),
    #[error("unknown agent '{0}'")]
    UnknownAgent(AgentId),
    #[error("unknown alert '{0}'")]
    UnknownAlert(String),
    #[error("participant is already {0}")]
    AlreadyTerminal(&'static str),
    #[error("stage '{stage}' is blocked: {reason}")]
    GateBlocked { stage: StageId, reason: &'static str },
    #[error("stage '{0}' requires an answer")]
    AnswerRequired(StageId),
    #[error("invalid answer: {0}")]
    InvalidAnswer(String),
    #[error("comprehension check failed on attempt {attempt}")]
    ComprehensionFailed {
        attempt: u32,
        per_question: BTreeMap<QuestionId, bool>,
    },
    #[error("illegal action: {0}")]
    IllegalAction(&'static str),
    #[error("cohort '{0}' is locked")]
    CohortLocked(CohortId),
    #[error("destination cohort '{0}' is locked")]
    DestinationLocked(CohortId),
    #[error("transfer offer expired")]
    OfferExpired,
    #[error("no pending transfer offer")]
    NoPendingOffer,
    #[error("a transfer offer is already pending")]
    OfferAlreadyPending,
    #[error("participant is not a member of cohort '{0}'")]
    NotAMember(CohortId),
    #[error("an attention check is already pending")]
    CheckAlreadyPending,
    #[error("no attention check is pending")]
    CheckNotPending,
    #[error("stages cannot be edited once participants exist")]
    EditFrozen,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl EngineError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Storage(_) => "storageFailure",
            EngineError::Replay(_) => "replayFailure",
            EngineError::UnknownParticipant(_) => "unknownParticipant",
            EngineError::UnknownPrivateId => "unknownPrivateId",
            EngineError::UnknownCohort(_) => "unknownCohort",
            EngineError::UnknownAgent(_) => "unknownAgent",
            EngineError::UnknownAlert(_) => "unknownAlert",
            EngineError::AlreadyTerminal(_) => "alreadyTerminal",
            EngineError::GateBlocked { .. } => "gateBlocked",
            EngineError::AnswerRequired(_) => "answerRequired",
            EngineError::InvalidAnswer(_) => "invalidAnswer",
            EngineError::ComprehensionFailed { .. } => "comprehensionFailed",
            EngineError::IllegalAction(_) => "illegalAction",
            EngineError::CohortLocked(_) => "cohortLocked",
            EngineError::DestinationLocked(_) => "destinationLocked",
            EngineError::OfferExpired => "offerExpired",
            EngineError::NoPendingOffer => "noPendingOffer",
            EngineError::OfferAlreadyPending => "offerAlreadyPending",
            EngineError::NotAMember(_) => "notAMember",
            EngineError::CheckAlreadyPending => "checkAlreadyPending",
            EngineError::CheckNotPending => "checkNotPending",
            EngineError::EditFrozen => "editFrozen",
            EngineError::InvalidConfig(_) => "invalidConfig",
        }
    }

    /// Finer reason for gate and illegal-action errors.
    pub fn reason(&self) -> Option<&'static str> {
        match self {
            EngineError::GateBlocked { reason, .. } => Some(reason),
            EngineError::IllegalAction(r) => Some(r),
            EngineError::AlreadyTerminal(r) => Some(r),
            _ => None,
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

/// Chat key: the stage id for group chats, `<stage>~<publicId>` for private
/// chats.
pub fn chat_key(stage: &StageConfig, owner: &PublicId) -> StageId {
    match stage.params {
        StageParams::PrivateChat(_) => StageId::from(format!("{}~{}", stage.id, owner)),
        _ => stage.id.clone(),
    }
}

/// Stage id and private-chat owner of a chat key.
pub fn split_chat_key(key: &StageId) -> (StageId, Option<PublicId>) {
    match key.as_str().split_once('~') {
        Some((s, p)) => (StageId::from(s), Some(PublicId::from(p))),
        None => (key.clone(), None),
    }
}

#[derive(Debug, Clone)]
pub struct RoundJob {
    pub chat: StageId,
    pub request: RoundRequest,
}

#[derive(Debug, Clone)]
pub struct StageJob {
    pub public_id: PublicId,
    pub task: StageTask,
}

/// Provider work the engine is waiting on.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Job {
    Round(RoundJob),
    Stage(StageJob),
}

/// A participant created by [`Engine::add_participant`]. The private id is
/// only ever returned here.
#[derive(Debug, Clone)]
pub struct NewParticipant {
    pub public_id: PublicId,
    pub private_id: PrivateId,
}

const SETTLE_LIMIT: usize = 100_000;

pub struct Engine {
    state: ExperimentState,
    log: EventLog,
    ids: IdGen,
    presence: PresenceStore,
    issued_rounds: BTreeSet<(CohortId, StageId, u64)>,
    issued_tasks: BTreeSet<u64>,
    outbox: Vec<EventRecord>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("experiment", &self.state.config.id)
            .field("applied", &self.state.applied)
            .finish()
    }
}

impl Engine {
    /// Starts a new experiment log.
    pub fn create(
        config: ExperimentConfig,
        seed: u64,
        ids: IdGen,
        sink: Option<Box<dyn EventSink>>,
        now: Timestamp,
    ) -> EngineResult<Self> {
        let report = validate_experiment_config(&config);
        if let Some(e) = report.errors().next() {
            return Err(EngineError::InvalidConfig(e.to_string()));
        }
        let mut log = EventLog::new();
        if let Some(s) = sink {
            log = log.with_sink(s);
        }
        let actor = match config.creator() {
            Some(c) => Actor::Experimenter { id: c.clone() },
            None => Actor::System,
        };
        let rec = log.append(None, now, actor, Event::ExperimentCreated { config, seed })?;
        let state = ExperimentState::genesis(&rec)?;
        Ok(Engine {
            state,
            log,
            ids,
            presence: PresenceStore::new(),
            issued_rounds: BTreeSet::new(),
            issued_tasks: BTreeSet::new(),
            outbox: vec![rec],
        })
    }

    /// Resumes from persisted records. `state` may be a restored snapshot
    /// already brought up to the end of `records`.
    pub fn resume(
        records: Vec<EventRecord>,
        state: Option<ExperimentState>,
        ids: IdGen,
        sink: Option<Box<dyn EventSink>>,
    ) -> EngineResult<Self> {
        let state = match state {
            Some(s) => s,
            None => ExperimentState::replay(&records)?,
        };
        if state.applied != records.len() as u64 {
            return Err(EngineError::Replay(ReplayError::OutOfOrder {
                expected: records.len() as u64,
                found: state.applied,
            }));
        }
        let mut log = EventLog::from_records(records);
        if let Some(s) = sink {
            log = log.with_sink(s);
        }
        Ok(Engine {
            state,
            log,
            ids,
            presence: PresenceStore::new(),
            issued_rounds: BTreeSet::new(),
            issued_tasks: BTreeSet::new(),
            outbox: Vec::new(),
        })
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    pub fn records(&self) -> &[EventRecord] {
        self.log.records()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn presence(&self) -> &PresenceStore {
        &self.presence
    }

    /// Records appended since the last drain, for fan-out.
    pub fn drain_outbox(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.outbox)
    }

    fn emit(&mut self, cohort: Option<CohortId>, actor: Actor, event: Event, now: Timestamp) -> EngineResult<()> {
        let rec = self.log.append(cohort, now, actor, event)?;
        self.state.apply(&rec);
        self.log.maybe_snapshot(&self.state)?;
        self.outbox.push(rec);
        Ok(())
    }

    fn participant(&self, id: &PublicId) -> EngineResult<&ParticipantRecord> {
        self.state
            .participants
            .get(id)
            .ok_or_else(|| EngineError::UnknownParticipant(id.clone()))
    }

    fn live_participant(&self, id: &PublicId) -> EngineResult<&ParticipantRecord> {
        let p = self.participant(id)?;
        match p.status {
            ParticipantStatus::Booted => Err(EngineError::AlreadyTerminal("booted")),
            ParticipantStatus::Completed => Err(EngineError::AlreadyTerminal("completed")),
            _ => Ok(p),
        }
    }

    fn cohort_of(&self, id: &PublicId) -> EngineResult<CohortId> {
        Ok(self.participant(id)?.cohort_id.clone())
    }

    fn agent_paused(&self, agent: &AgentId) -> bool {
        self.state.paused_agents.contains(agent)
    }

    // ----- experimenter commands -----

    pub fn edit_metadata(&mut self, actor: Actor, metadata: Metadata, now: Timestamp) -> EngineResult<()> {
        self.emit(None, actor, Event::MetadataEdited { metadata }, now)
    }

    /// Replaces the stage list. Rejected once any participant exists.
    pub fn edit_stages(&mut self, actor: Actor, stages: Vec<StageConfig>, now: Timestamp) -> EngineResult<()> {
        if !self.state.participants.is_empty() {
            return Err(EngineError::EditFrozen);
        }
        let mut candidate = self.state.config.clone();
        candidate.stages = stages.clone();
        if let Some(e) = validate_experiment_config(&candidate).errors().next() {
            return Err(EngineError::InvalidConfig(e.to_string()));
        }
        self.emit(None, actor, Event::StagesEdited { stages }, now)
    }

    /// Adds or replaces an agent template. Takes effect from the next round.
    pub fn edit_agent_spec(&mut self, actor: Actor, spec: AgentSpec, now: Timestamp) -> EngineResult<()> {
        let mut candidate = self.state.config.clone();
        match candidate.agent_templates.iter_mut().find(|a| a.id == spec.id) {
            Some(a) => *a = spec.clone(),
            None => candidate.agent_templates.push(spec.clone()),
        }
        if let Some(e) = validate_experiment_config(&candidate).errors().next() {
            return Err(EngineError::InvalidConfig(e.to_string()));
        }
        self.emit(None, actor, Event::AgentSpecEdited { spec }, now)
    }

    pub fn pause_agent(&mut self, actor: Actor, agent: &AgentId, paused: bool, now: Timestamp) -> EngineResult<()> {
        if self.state.config.agent(agent).is_none() {
            return Err(EngineError::UnknownAgent(agent.clone()));
        }
        if self.agent_paused(agent) == paused {
            return Ok(());
        }
        self.emit(
            None,
            actor,
            Event::AgentPaused {
                agent_id: agent.clone(),
                paused,
            },
            now,
        )?;
        self.settle(now)
    }

    pub fn create_cohort(&mut self, actor: Actor, name: &str, now: Timestamp) -> EngineResult<CohortId> {
        let id = CohortId::from(format!("cohort-{}", self.state.counters.cohorts + 1));
        self.emit(
            Some(id.clone()),
            actor,
            Event::CohortCreated {
                cohort_id: id.clone(),
                name: name.to_string(),
            },
            now,
        )?;
        Ok(id)
    }

    /// Idempotent.
    pub fn lock_cohort(&mut self, actor: Actor, cohort: &CohortId, now: Timestamp) -> EngineResult<()> {
        let c = self
            .state
            .cohort(cohort)
            .ok_or_else(|| EngineError::UnknownCohort(cohort.clone()))?;
        if c.locked {
            return Ok(());
        }
        self.emit(
            Some(cohort.clone()),
            actor,
            Event::CohortLocked {
                cohort_id: cohort.clone(),
            },
            now,
        )
    }

    /// Creates a participant (human, or agent when `agent` is set) and
    /// returns its join secret.
    pub fn add_participant(
        &mut self,
        actor: Actor,
        cohort: &CohortId,
        external_id: Option<String>,
        agent: Option<AgentId>,
        now: Timestamp,
    ) -> EngineResult<NewParticipant> {
        let c = self
            .state
            .cohort(cohort)
            .ok_or_else(|| EngineError::UnknownCohort(cohort.clone()))?;
        if c.locked {
            return Err(EngineError::CohortLocked(cohort.clone()));
        }
        if let Some(a) = &agent {
            if self.state.config.agent(a).is_none() {
                return Err(EngineError::UnknownAgent(a.clone()));
            }
        }
        let public_id = loop {
            let id = self.ids.public_id();
            if !self.state.participants.contains_key(&id) {
                break id;
            }
        };
        let private_id = loop {
            let id = self.ids.private_id();
            if !self.state.digests.contains_key(&id.digest()) {
                break id;
            }
        };
        let is_agent = agent.is_some();
        self.emit(
            Some(cohort.clone()),
            actor,
            Event::ParticipantCreated {
                public_id: public_id.clone(),
                private_id_digest: private_id.digest(),
                external_id,
                cohort_id: cohort.clone(),
                agent_id: agent,
            },
            now,
        )?;
        if is_agent {
            self.emit(
                Some(cohort.clone()),
                Actor::System,
                Event::ParticipantJoined {
                    public_id: public_id.clone(),
                },
                now,
            )?;
        }
        self.settle(now)?;
        Ok(NewParticipant { public_id, private_id })
    }

    pub fn resolve_private_id(&self, digest: &PrivateIdDigest) -> Option<&PublicId> {
        self.state.digests.get(digest)
    }

    pub fn offer_transfer(
        &mut self,
        actor: Actor,
        id: &PublicId,
        to: &CohortId,
        now: Timestamp,
    ) -> EngineResult<String> {
        let p = self.live_participant(id)?;
        let dest = self.state.cohort(to).ok_or_else(|| EngineError::UnknownCohort(to.clone()))?;
        if &p.cohort_id == to {
            return Err(EngineError::IllegalAction("sameCohort"));
        }
        if dest.locked {
            return Err(EngineError::DestinationLocked(to.clone()));
        }
        if self.state.pending_offer_for(id).is_some() {
            return Err(EngineError::OfferAlreadyPending);
        }
        let offer = TransferOffer {
            id: format!("offer-{}", self.state.counters.offers + 1),
            participant_public_id: id.clone(),
            from_cohort_id: p.cohort_id.clone(),
            to_cohort_id: to.clone(),
            expires_at: now.plus_secs(i64::from(self.state.config.settings.transfer_offer_seconds)),
            state: OfferState::Pending,
        };
        let offer_id = offer.id.clone();
        self.emit(Some(to.clone()), actor, Event::TransferOffered { offer }, now)?;
        Ok(offer_id)
    }

    pub fn boot(&mut self, actor: Actor, id: &PublicId, now: Timestamp) -> EngineResult<()> {
        let cohort = self.live_participant(id)?.cohort_id.clone();
        self.emit(Some(cohort), actor, Event::ParticipantBooted { public_id: id.clone() }, now)?;
        self.presence.forget(id);
        self.settle(now)
    }

    /// Boot with a membership check against the cohort the caller believes
    /// the participant is in.
    pub fn boot_from(&mut self, actor: Actor, cohort: &CohortId, id: &PublicId, now: Timestamp) -> EngineResult<()> {
        if &self.cohort_of(id)? != cohort {
            return Err(EngineError::NotAMember(cohort.clone()));
        }
        self.boot(actor, id, now)
    }

    pub fn send_attention_check(
        &mut self,
        actor: Actor,
        id: &PublicId,
        deadline_seconds: u32,
        now: Timestamp,
    ) -> EngineResult<String> {
        let cohort = self.live_participant(id)?.cohort_id.clone();
        if self.state.pending_check_for(id).is_some() {
            return Err(EngineError::CheckAlreadyPending);
        }
        let check = AttentionCheck {
            id: format!("check-{}", self.state.counters.checks + 1),
            participant_public_id: id.clone(),
            sent_at: now,
            deadline_seconds: deadline_seconds.max(1),
            state: CheckState::Pending,
        };
        let check_id = check.id.clone();
        self.emit(Some(cohort), actor, Event::AttentionCheckSent { check }, now)?;
        Ok(check_id)
    }

    pub fn message_participant(&mut self, actor: Actor, id: &PublicId, text: &str, now: Timestamp) -> EngineResult<()> {
        let cohort = self.cohort_of(id)?;
        self.emit(
            Some(cohort),
            actor,
            Event::FacilitatorMessage {
                public_id: id.clone(),
                text: text.to_string(),
            },
            now,
        )
    }

    pub fn resolve_alert(&mut self, actor: Actor, alert_id: &str, response: &str, now: Timestamp) -> EngineResult<()> {
        let alert = self
            .state
            .alerts
            .get(alert_id)
            .ok_or_else(|| EngineError::UnknownAlert(alert_id.to_string()))?;
        if alert.resolved_at.is_some() {
            return Err(EngineError::IllegalAction("alertResolved"));
        }
        let cohort = self.cohort_of(&alert.participant_public_id)?;
        self.emit(
            Some(cohort),
            actor,
            Event::AlertResolved {
                alert_id: alert_id.to_string(),
                response: response.to_string(),
            },
            now,
        )
    }

    // ----- participant commands -----

    /// First join records the participant as joined; rejoining is free.
    pub fn join(&mut self, digest: &PrivateIdDigest, now: Timestamp) -> EngineResult<PublicId> {
        let id = self
            .state
            .digests
            .get(digest)
            .cloned()
            .ok_or(EngineError::UnknownPrivateId)?;
        let p = self.participant(&id)?;
        if !p.joined {
            let cohort = p.cohort_id.clone();
            if self.state.cohorts[&cohort].locked {
                return Err(EngineError::CohortLocked(cohort));
            }
            self.emit(
                Some(cohort),
                Actor::Participant { public_id: id.clone() },
                Event::ParticipantJoined { public_id: id.clone() },
                now,
            )?;
            self.settle(now)?;
        }
        Ok(id)
    }

    pub fn heartbeat(&mut self, id: &PublicId, active: bool, now: Timestamp) -> EngineResult<PresenceState> {
        let p = self.live_participant(id)?;
        let cohort = &self.state.cohorts[&p.cohort_id];
        let indices: Vec<usize> = self.state.live_members(cohort).map(|m| m.current_stage_index).collect();
        let idx = p.current_stage_index;
        self.presence.record(id, now, active);
        Ok(self
            .presence
            .state(id, idx, &indices, now, &self.state.config.settings.presence))
    }

    /// Presence of every live member of a cohort.
    pub fn presence_states(&self, cohort: &CohortId, now: Timestamp) -> Vec<PresenceState> {
        let Some(c) = self.state.cohort(cohort) else { return Vec::new() };
        let indices: Vec<usize> = self.state.live_members(c).map(|m| m.current_stage_index).collect();
        self.state
            .live_members(c)
            .map(|m| {
                self.presence.state(
                    &m.public_id,
                    m.current_stage_index,
                    &indices,
                    now,
                    &self.state.config.settings.presence,
                )
            })
            .collect()
    }

    pub fn save_draft(&mut self, actor: Actor, id: &PublicId, content: AnswerContent, now: Timestamp) -> EngineResult<()> {
        let p = self.live_participant(id)?;
        let stage = self
            .state
            .stage_at(p.current_stage_index)
            .ok_or(EngineError::AlreadyTerminal("completed"))?;
        let (cohort, stage_id) = (p.cohort_id.clone(), stage.id.clone());
        self.emit(
            Some(cohort),
            actor,
            Event::DraftSaved {
                public_id: id.clone(),
                stage_id,
                content,
            },
            now,
        )
    }

    /// Submits the current stage (with its answer, if it collects one) and
    /// moves to the next.
    pub fn advance(&mut self, actor: Actor, id: &PublicId, answer: Option<AnswerContent>, now: Timestamp) -> EngineResult<()> {
        let r = self.advance_inner(actor, id, answer, now);
        // A failed comprehension attempt is still recorded and may matter to
        // derived rules.
        if r.is_ok() || matches!(r, Err(EngineError::ComprehensionFailed { .. })) {
            self.settle(now)?;
        }
        r
    }

    fn advance_inner(&mut self, actor: Actor, id: &PublicId, answer: Option<AnswerContent>, now: Timestamp) -> EngineResult<()> {
        let p = self.live_participant(id)?;
        if p.status == ParticipantStatus::TransferPending {
            return Err(EngineError::IllegalAction("transferPending"));
        }
        let idx = p.current_stage_index;
        let stage = self
            .state
            .stage_at(idx)
            .cloned()
            .ok_or(EngineError::AlreadyTerminal("completed"))?;
        let cohort_id = p.cohort_id.clone();
        let cohort = &self.state.cohorts[&cohort_id];
        let blocked = |reason| EngineError::GateBlocked {
            stage: stage.id.clone(),
            reason,
        };
        if !rules::gate_open(cohort, &stage) {
            return Err(blocked("waitingForCohort"));
        }
        match &stage.params {
            StageParams::GroupChat(_) | StageParams::PrivateChat(_) => {
                let key = chat_key(&stage, id);
                if !cohort.chats.get(&key).is_some_and(|c| c.ended) {
                    return Err(blocked("chatInProgress"));
                }
            }
            StageParams::Transfer(_) => return Err(EngineError::IllegalAction("awaitingTransfer")),
            StageParams::Reveal(_) if !cohort.reveals.contains_key(&stage.id) => return Err(blocked("revealPending")),
            StageParams::Payout(_) if !self.state.payouts.contains_key(id) => return Err(blocked("payoutPending")),
            StageParams::RoleAssignment(_) if !p.roles.contains_key(&stage.id) => return Err(blocked("rolePending")),
            StageParams::Profile(pp) if pp.mode == ProfileMode::AssignedPseudonym && p.pseudonym_set.is_none() => {
                return Err(blocked("pseudonymPending"))
            }
            _ => {}
        }
        let stored = match rules::check_answer(&self.state, cohort, p, &stage, answer.as_ref()) {
            Ok(s) => s,
            Err(AnswerProblem::Required) => return Err(EngineError::AnswerRequired(stage.id.clone())),
            Err(AnswerProblem::Invalid(m)) => return Err(EngineError::InvalidAnswer(m)),
        };
        if let (StageParams::Comprehension(s), Some(content)) = (&stage.params, &stored) {
            let grade = rules::grade_comprehension(s, content).map_err(|e| EngineError::InvalidAnswer(e.to_string()))?;
            if !grade.passed {
                let attempt = p.comprehension_attempts.get(&stage.id).copied().unwrap_or(0) + 1;
                self.emit(
                    Some(cohort_id),
                    actor,
                    Event::ComprehensionFailed {
                        public_id: id.clone(),
                        stage_id: stage.id.clone(),
                        attempt,
                        per_question: grade.per_question.clone(),
                    },
                    now,
                )?;
                return Err(EngineError::ComprehensionFailed {
                    attempt,
                    per_question: grade.per_question,
                });
            }
        }
        if let Some(content) = stored {
            self.emit(
                Some(cohort_id.clone()),
                actor.clone(),
                Event::AnswerSubmitted {
                    public_id: id.clone(),
                    answer: AnswerRecord {
                        stage_id: stage.id.clone(),
                        submitted_at: now,
                        timed_out: false,
                        content,
                    },
                },
                now,
            )?;
        }
        self.emit(
            Some(cohort_id),
            actor.clone(),
            Event::Advanced {
                public_id: id.clone(),
                from: idx,
                to: idx + 1,
                timed_out: false,
            },
            now,
        )?;
        self.complete_if_done(id, actor, now)
    }

    fn complete_if_done(&mut self, id: &PublicId, actor: Actor, now: Timestamp) -> EngineResult<()> {
        let p = self.participant(id)?;
        if p.status.is_terminal() || p.current_stage_index < self.state.stages().len() {
            return Ok(());
        }
        let cohort = p.cohort_id.clone();
        let redirect_url = self.state.config.metadata.prolific_redirect_url.clone();
        self.emit(
            Some(cohort),
            actor,
            Event::ParticipantCompleted {
                public_id: id.clone(),
                reason: CompletionReason::Finished,
                redirect_url,
            },
            now,
        )
    }

    /// Chat stage the participant is currently in, with its key, if open.
    fn open_chat(&self, id: &PublicId) -> EngineResult<(CohortId, StageConfig, StageId)> {
        let p = self.live_participant(id)?;
        if p.status == ParticipantStatus::TransferPending {
            return Err(EngineError::IllegalAction("transferPending"));
        }
        let stage = self
            .state
            .stage_at(p.current_stage_index)
            .ok_or(EngineError::AlreadyTerminal("completed"))?;
        if !stage.kind().is_chat() {
            return Err(EngineError::IllegalAction("notInChatStage"));
        }
        let cohort = &self.state.cohorts[&p.cohort_id];
        if !rules::gate_open(cohort, stage) {
            return Err(EngineError::GateBlocked {
                stage: stage.id.clone(),
                reason: "waitingForCohort",
            });
        }
        let key = chat_key(stage, id);
        if cohort.chats.get(&key).is_some_and(|c| c.ended) {
            return Err(EngineError::IllegalAction("chatEnded"));
        }
        Ok((p.cohort_id.clone(), stage.clone(), key))
    }

    pub fn send_chat(&mut self, actor: Actor, id: &PublicId, text: &str, now: Timestamp) -> EngineResult<String> {
        let text = text.trim();
        if text.is_empty() {
            return Err(EngineError::IllegalAction("emptyMessage"));
        }
        let (cohort, stage, key) = self.open_chat(id)?;
        let p = self.participant(id)?;
        let message = ChatMessage {
            id: format!("msg-{}", self.state.counters.messages + 1),
            cohort_id: cohort.clone(),
            stage_id: stage.id.clone(),
            author_id: id.to_string(),
            author_kind: if p.is_agent() { AuthorKind::Agent } else { AuthorKind::Participant },
            display_name: p.display_name(),
            text: text.to_string(),
            timestamp: now,
        };
        let msg_id = message.id.clone();
        self.emit(Some(cohort), actor, Event::ChatMessagePosted { stage_id: key, message }, now)?;
        self.settle(now)?;
        Ok(msg_id)
    }

    pub fn vote_end_chat(&mut self, actor: Actor, id: &PublicId, now: Timestamp) -> EngineResult<()> {
        let (cohort, _, key) = self.open_chat(id)?;
        if self.state.cohorts[&cohort].chats.get(&key).is_some_and(|c| c.end_votes.contains(id)) {
            return Ok(());
        }
        self.emit(
            Some(cohort),
            actor,
            Event::EndChatVoted {
                stage_id: key,
                public_id: id.clone(),
            },
            now,
        )?;
        self.settle(now)
    }

    pub fn respond_transfer(&mut self, actor: Actor, id: &PublicId, accept: bool, now: Timestamp) -> EngineResult<()> {
        self.live_participant(id)?;
        let offer = self.state.pending_offer_for(id).cloned().ok_or(EngineError::NoPendingOffer)?;
        let stream = Some(offer.to_cohort_id.clone());
        if now > offer.expires_at {
            self.emit(
                stream,
                Actor::System,
                Event::TransferResolved {
                    offer_id: offer.id,
                    state: OfferState::Expired,
                },
                now,
            )?;
            return Err(EngineError::OfferExpired);
        }
        let state = if accept {
            if self.state.cohorts[&offer.to_cohort_id].locked {
                return Err(EngineError::DestinationLocked(offer.to_cohort_id));
            }
            OfferState::Accepted
        } else {
            OfferState::Declined
        };
        self.emit(stream, actor, Event::TransferResolved { offer_id: offer.id, state }, now)?;
        self.settle(now)
    }

    pub fn acknowledge_attention_check(&mut self, id: &PublicId, now: Timestamp) -> EngineResult<CheckState> {
        let check = self.state.pending_check_for(id).cloned().ok_or(EngineError::CheckNotPending)?;
        let cohort = self.cohort_of(id)?;
        let state = if check.acknowledged_in_time(now) {
            CheckState::Passed
        } else {
            CheckState::Failed
        };
        self.emit(
            Some(cohort),
            Actor::Participant { public_id: id.clone() },
            Event::AttentionCheckResolved {
                check_id: check.id.clone(),
                state,
            },
            now,
        )?;
        if state == CheckState::Failed {
            self.notify_failed_check(id, now)?;
        }
        Ok(state)
    }

    fn notify_failed_check(&mut self, id: &PublicId, now: Timestamp) -> EngineResult<()> {
        let cohort = self.cohort_of(id)?;
        self.emit(
            Some(cohort),
            Actor::System,
            Event::FacilitatorNotice {
                public_id: Some(id.clone()),
                message: format!("{id} failed an attention check; consider booting"),
            },
            now,
        )
    }

    pub fn raise_alert(&mut self, actor: Actor, id: &PublicId, message: &str, now: Timestamp) -> EngineResult<String> {
        let cohort = self.live_participant(id)?.cohort_id.clone();
        let alert = crate::presence::Alert {
            id: format!("alert-{}", self.state.counters.alerts + 1),
            participant_public_id: id.clone(),
            message: message.to_string(),
            raised_at: now,
            resolved_at: None,
            facilitator_response: None,
        };
        let alert_id = alert.id.clone();
        self.emit(Some(cohort), actor, Event::AlertRaised { alert }, now)?;
        Ok(alert_id)
    }

    // ----- time -----

    /// Processes everything due at `now`: check expiry, offer expiry, draft
    /// delivery, stage timers and lobby timeouts.
    pub fn tick(&mut self, now: Timestamp) -> EngineResult<()> {
        let expired: Vec<AttentionCheck> = self
            .state
            .attention_checks
            .values()
            .filter(|c| c.state == CheckState::Pending && c.expired(now))
            .cloned()
            .collect();
        for c in expired {
            let cohort = self.cohort_of(&c.participant_public_id)?;
            self.emit(
                Some(cohort),
                Actor::System,
                Event::AttentionCheckResolved {
                    check_id: c.id.clone(),
                    state: CheckState::Failed,
                },
                now,
            )?;
            self.notify_failed_check(&c.participant_public_id, now)?;
        }

        let stale: Vec<TransferOffer> = self
            .state
            .offers
            .values()
            .filter(|o| o.state == OfferState::Pending && now > o.expires_at)
            .cloned()
            .collect();
        for o in stale {
            self.emit(
                Some(o.to_cohort_id.clone()),
                Actor::System,
                Event::TransferResolved {
                    offer_id: o.id,
                    state: OfferState::Expired,
                },
                now,
            )?;
        }

        self.deliver_due(now)?;
        self.run_timers(now)?;
        self.settle(now)
    }

    fn deliver_due(&mut self, now: Timestamp) -> EngineResult<()> {
        let mut due = Vec::new();
        for c in self.state.cohorts.values() {
            for (key, chat) in &c.chats {
                if let Slot::Typing { schedule, .. } = &chat.slot {
                    if schedule.deliver_at <= now {
                        due.push((c.id.clone(), key.clone(), schedule.clone()));
                    }
                }
            }
        }
        for (cohort, key, schedule) in due {
            let (stage_id, _) = split_chat_key(&key);
            let as_participant = self
                .state
                .participants
                .get(&PublicId::from(schedule.agent_id.as_str()))
                .filter(|p| p.cohort_id == cohort);
            let template = match as_participant {
                Some(p) => p.agent_id.clone().unwrap_or_else(|| schedule.agent_id.clone()),
                None => schedule.agent_id.clone(),
            };
            if self.agent_paused(&template) {
                self.emit(
                    Some(cohort),
                    Actor::System,
                    Event::AgentDraftDropped {
                        stage_id: key,
                        agent_id: schedule.agent_id.clone(),
                        reason: "paused".to_string(),
                    },
                    now,
                )?;
                continue;
            }
            let display_name = match as_participant {
                Some(p) => p.display_name(),
                None => self
                    .state
                    .config
                    .agent(&schedule.agent_id)
                    .map(|a| a.profile.display_name.clone())
                    .unwrap_or_else(|| schedule.agent_id.to_string()),
            };
            let message = ChatMessage {
                id: format!("msg-{}", self.state.counters.messages + 1),
                cohort_id: cohort.clone(),
                stage_id,
                author_id: schedule.agent_id.to_string(),
                author_kind: AuthorKind::Agent,
                display_name,
                text: schedule.draft.response.clone(),
                timestamp: schedule.deliver_at,
            };
            self.emit(
                Some(cohort),
                Actor::Agent {
                    agent_id: schedule.agent_id.clone(),
                },
                Event::AgentDraftDelivered { stage_id: key, message },
                now,
            )?;
        }
        Ok(())
    }

    /// When the current stage's timer for a participant fires, or `None`.
    /// Timers count from arrival or gate opening, whichever is later.
    fn timer_due(&self, p: &ParticipantRecord) -> Option<Timestamp> {
        if p.status != ParticipantStatus::Active {
            return None;
        }
        let stage = self.state.stage_at(p.current_stage_index)?;
        let secs = stage.ui.auto_advance_timer_seconds?;
        if matches!(stage.kind(), StageKind::Comprehension | StageKind::Transfer) {
            return None;
        }
        let mut start = *p.arrived_at.get(&p.current_stage_index)?;
        if stage.ui.wait_for_all_participants {
            let opened = *self.state.cohorts.get(&p.cohort_id)?.gates.get(&stage.id)?;
            start = start.max(opened);
        }
        Some(start.plus_secs(i64::from(secs)))
    }

    fn run_timers(&mut self, now: Timestamp) -> EngineResult<()> {
        let due: Vec<PublicId> = self
            .state
            .participants
            .values()
            .filter(|p| self.timer_due(p).is_some_and(|t| t <= now))
            .map(|p| p.public_id.clone())
            .collect();
        for id in due {
            let p = &self.state.participants[&id];
            let idx = p.current_stage_index;
            let stage = self.state.stages()[idx].clone();
            let cohort = p.cohort_id.clone();
            let draft = p.drafts.get(&stage.id).cloned();
            let content = match &stage.params {
                StageParams::Survey(_) | StageParams::Comprehension(_) => {
                    Some(draft.unwrap_or(AnswerContent::Survey { answers: BTreeMap::new() }))
                }
                StageParams::SurveyPerParticipant(_) => {
                    Some(draft.unwrap_or(AnswerContent::PerParticipant { answers: Vec::new() }))
                }
                StageParams::RankingElection(_) => Some(draft.unwrap_or(AnswerContent::Ranking { ranking: Vec::new() })),
                StageParams::Profile(pp) if pp.mode == ProfileMode::SelfChosen => draft,
                StageParams::TermsOfService => draft,
                _ => None,
            };
            if let Some(content) = content {
                self.emit(
                    Some(cohort.clone()),
                    Actor::System,
                    Event::AnswerSubmitted {
                        public_id: id.clone(),
                        answer: AnswerRecord {
                            stage_id: stage.id.clone(),
                            submitted_at: now,
                            timed_out: true,
                            content,
                        },
                    },
                    now,
                )?;
            }
            self.emit(
                Some(cohort),
                Actor::System,
                Event::Advanced {
                    public_id: id.clone(),
                    from: idx,
                    to: idx + 1,
                    timed_out: true,
                },
                now,
            )?;
            self.complete_if_done(&id, Actor::System, now)?;
        }
        Ok(())
    }

    /// Earliest future instant at which [`Engine::tick`] has work.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        let mut best: Option<Timestamp> = None;
        let mut consider = |t: Timestamp| {
            if best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        for c in self.state.cohorts.values() {
            for chat in c.chats.values() {
                if let Slot::Typing { schedule, .. } = &chat.slot {
                    consider(schedule.deliver_at);
                }
            }
        }
        for c in self.state.attention_checks.values() {
            if c.state == CheckState::Pending {
                consider(Timestamp(c.deadline().0 + 1));
            }
        }
        for o in self.state.offers.values() {
            if o.state == OfferState::Pending {
                consider(Timestamp(o.expires_at.0 + 1));
            }
        }
        for p in self.state.participants.values() {
            if let Some(t) = self.timer_due(p) {
                consider(t);
            }
            if p.status == ParticipantStatus::Active {
                if let Some(StageParams::Transfer(t)) = self.state.stage_at(p.current_stage_index).map(|s| &s.params) {
                    if let Some(at) = p.arrived_at.get(&p.current_stage_index) {
                        consider(at.plus_secs(i64::from(t.timeout_seconds)));
                    }
                }
            }
        }
        best
    }

    // ----- derived rules -----

    /// Applies derived rules until none fires.
    pub fn settle(&mut self, now: Timestamp) -> EngineResult<()> {
        for _ in 0..SETTLE_LIMIT {
            let mut changed = false;
            changed |= self.open_gates(now)?;
            changed |= self.assign_pseudonyms(now)?;
            changed |= self.assign_roles(now)?;
            changed |= self.tally_elections(now)?;
            changed |= self.end_chats(now)?;
            changed |= self.start_rounds(now)?;
            changed |= self.build_reveals(now)?;
            changed |= self.compute_payouts(now)?;
            changed |= self.progress_agents(now)?;
            changed |= self.match_lobbies(now)?;
            changed |= self.complete_finished(now)?;
            if !changed {
                return Ok(());
            }
        }
        tracing::error!("derived rules did not settle");
        Ok(())
    }

    fn open_gates(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut open = Vec::new();
        for c in self.state.cohorts.values() {
            for (i, s) in self.state.stages().iter().enumerate() {
                if s.ui.wait_for_all_participants
                    && !c.gates.contains_key(&s.id)
                    && rules::wait_gate_satisfied(&self.state, c, i)
                {
                    open.push((c.id.clone(), s.id.clone()));
                }
            }
        }
        let changed = !open.is_empty();
        for (c, s) in open {
            self.emit(Some(c), Actor::System, Event::GateOpened { stage_id: s }, now)?;
        }
        Ok(changed)
    }

    fn assign_pseudonyms(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for c in self.state.cohorts.values() {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for p in self.state.members(c) {
                let name = p.profile.as_ref().map(|pr| pr.display_name.clone());
                let collides = p.pseudonym_set.is_some() && name.as_ref().is_some_and(|n| seen.contains(n));
                if let Some(n) = name {
                    seen.insert(n);
                }
                if p.status.is_terminal() {
                    continue;
                }
                let wanted = match self.state.stage_at(p.current_stage_index).map(|s| &s.params) {
                    Some(StageParams::Profile(pp)) if pp.mode == ProfileMode::AssignedPseudonym => pp.pseudonym_set,
                    _ => None,
                };
                let set = match (wanted, p.pseudonym_set) {
                    (Some(w), current) if current != Some(w) => Some(w),
                    (_, Some(cur)) if collides => Some(cur),
                    _ => None,
                };
                if let Some(set) = set {
                    todo.push((c.id.clone(), p.public_id.clone(), set));
                }
            }
        }
        let changed = !todo.is_empty();
        for (cohort, id, set) in todo {
            let c = &self.state.cohorts[&cohort];
            let taken: Vec<String> = self
                .state
                .members(c)
                .filter(|m| m.public_id != id)
                .filter_map(|m| m.profile.as_ref().map(|p| p.display_name.clone()))
                .collect();
            let mut rng = seeded_rng(derive_seed(
                self.state.seed,
                &["pseudonym", cohort.as_str(), id.as_str(), &self.state.applied.to_string()],
            ));
            let profile = pseudonyms::assign(set, &taken, &mut rng);
            self.emit(
                Some(cohort),
                Actor::System,
                Event::ProfileSet {
                    public_id: id,
                    profile,
                    pseudonym_set: Some(set),
                },
                now,
            )?;
        }
        Ok(changed)
    }

    fn assign_roles(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for c in self.state.cohorts.values() {
            for (i, s) in self.state.stages().iter().enumerate() {
                let StageParams::RoleAssignment(r) = &s.params else { continue };
                if r.roles.is_empty() {
                    continue;
                }
                let live: Vec<&ParticipantRecord> = self.state.live_members(c).collect();
                if live.is_empty() || live.iter().any(|p| p.current_stage_index < i) {
                    continue;
                }
                if !live.iter().any(|p| p.current_stage_index == i && !p.roles.contains_key(&s.id)) {
                    continue;
                }
                let mut members: Vec<PublicId> = self.state.counted_members(c).map(|p| p.public_id.clone()).collect();
                members.sort();
                let mut rng = seeded_rng(derive_seed(self.state.seed, &["roles", c.id.as_str(), s.id.as_str()]));
                rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut rng);
                for (k, m) in members.iter().enumerate() {
                    if !self.state.participants[m].roles.contains_key(&s.id) {
                        todo.push((c.id.clone(), s.id.clone(), m.clone(), r.roles[k % r.roles.len()].clone()));
                    }
                }
            }
        }
        let changed = !todo.is_empty();
        for (c, s, m, role) in todo {
            self.emit(
                Some(c),
                Actor::System,
                Event::RoleAssigned {
                    stage_id: s,
                    public_id: m,
                    role,
                },
                now,
            )?;
        }
        Ok(changed)
    }

    fn tally_elections(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for c in self.state.cohorts.values() {
            for s in self.state.stages() {
                let StageParams::RankingElection(e) = &s.params else { continue };
                let candidates = rules::all_candidates(&self.state, c, e);
                let ballots = views::ballots(&self.state, c, &s.id, &candidates);
                let mut tally = Tally::new(candidates.iter().cloned());
                if ballots.iter().any(|b| tally.add(b).is_err()) {
                    continue;
                }
                let Ok(result) = tally.result() else { continue };
                let complete = views::stage_complete(&self.state, c, &s.id);
                let fresh = match c.elections.get(&s.id) {
                    Some(prev) => prev.result != result || prev.complete != complete,
                    None => true,
                };
                if fresh {
                    todo.push((c.id.clone(), s.id.clone(), result, complete));
                }
            }
        }
        let changed = !todo.is_empty();
        for (c, s, result, complete) in todo {
            self.emit(
                Some(c),
                Actor::System,
                Event::ElectionTallied {
                    stage_id: s,
                    result,
                    complete,
                },
                now,
            )?;
        }
        Ok(changed)
    }

    /// Agents taking part in a chat: the stage's mediators plus agent
    /// participants currently at it, minus paused ones. Agent participants
    /// appear under their publicId so readiness stays per participant.
    fn round_agents(&self, cohort: &Cohort, key: &StageId) -> Vec<AgentSpec> {
        let (stage_id, owner) = split_chat_key(key);
        let Some(idx) = self.state.config.stage_index(&stage_id) else { return Vec::new() };
        let stage = &self.state.stages()[idx];
        let Some(params) = stage.params.chat() else { return Vec::new() };
        let mut out: Vec<AgentSpec> = params
            .mediators
            .iter()
            .filter(|m| !self.agent_paused(m))
            .filter_map(|m| self.state.config.agent(m).cloned())
            .collect();
        if owner.is_none() {
            for p in self.state.live_members(cohort) {
                let Some(a) = &p.agent_id else { continue };
                if p.current_stage_index != idx || self.agent_paused(a) {
                    continue;
                }
                if let Some(spec) = self.state.config.agent(a) {
                    let mut spec = spec.clone();
                    spec.id = AgentId::from(p.public_id.as_str());
                    spec.profile.display_name = p.display_name();
                    out.push(spec);
                }
            }
        }
        out
    }

    fn end_chats(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for c in self.state.cohorts.values() {
            for (i, s) in self.state.stages().iter().enumerate() {
                let Some(params) = s.params.chat() else { continue };
                if !rules::gate_open(c, s) {
                    continue;
                }
                let at_stage: Vec<&ParticipantRecord> =
                    self.state.live_members(c).filter(|p| p.current_stage_index == i).collect();
                let keys: Vec<(StageId, Vec<&ParticipantRecord>)> = match s.kind() {
                    StageKind::PrivateChat => at_stage
                        .iter()
                        .filter(|p| !p.is_agent())
                        .map(|p| (chat_key(s, &p.public_id), vec![*p]))
                        .collect(),
                    _ if at_stage.is_empty() => Vec::new(),
                    _ => vec![(s.id.clone(), self.state.live_members(c).filter(|p| !p.is_agent()).collect())],
                };
                for (key, humans) in keys {
                    let chat = c.chats.get(&key);
                    if chat.is_some_and(|ch| ch.ended || matches!(ch.slot, Slot::Calling { .. })) {
                        continue;
                    }
                    let votes = chat.map(|ch| humans.iter().filter(|h| ch.end_votes.contains(&h.public_id)).count()).unwrap_or(0);
                    let quorum = params
                        .end_quorum
                        .map(|q| q as usize)
                        .unwrap_or(humans.len())
                        .min(humans.len());
                    if votes < quorum {
                        continue;
                    }
                    let agents_ready = self.round_agents(c, &key).iter().all(|a| {
                        chat.and_then(|ch| ch.agent_ready.get(&a.id)).copied().unwrap_or(true)
                    });
                    if !agents_ready {
                        continue;
                    }
                    let typing = chat.and_then(|ch| match &ch.slot {
                        Slot::Typing { schedule, .. } => Some(schedule.agent_id.clone()),
                        _ => None,
                    });
                    todo.push((c.id.clone(), key, typing));
                }
            }
        }
        let changed = !todo.is_empty();
        for (c, key, typing) in todo {
            if let Some(agent_id) = typing {
                self.emit(
                    Some(c.clone()),
                    Actor::System,
                    Event::AgentDraftDropped {
                        stage_id: key.clone(),
                        agent_id,
                        reason: "chatEnded".to_string(),
                    },
                    now,
                )?;
            }
            self.emit(Some(c), Actor::System, Event::ChatEnded { stage_id: key }, now)?;
        }
        Ok(changed)
    }

    fn start_rounds(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for c in self.state.cohorts.values() {
            for (key, chat) in &c.chats {
                if chat.ended || !chat.pending_round || chat.slot != Slot::Idle {
                    continue;
                }
                if self.round_agents(c, key).is_empty() {
                    continue;
                }
                let trigger = chat.last_human_message().map(|m| m.id.clone()).unwrap_or_default();
                todo.push((c.id.clone(), key.clone(), chat.rounds + 1, trigger));
            }
        }
        let changed = !todo.is_empty();
        for (c, key, round_id, trigger) in todo {
            self.emit(
                Some(c),
                Actor::System,
                Event::AgentRoundStarted {
                    stage_id: key,
                    round_id,
                    trigger_message_id: trigger,
                },
                now,
            )?;
        }
        Ok(changed)
    }

    fn build_reveals(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for c in self.state.cohorts.values() {
            for (i, s) in self.state.stages().iter().enumerate() {
                let StageParams::Reveal(r) = &s.params else { continue };
                if c.reveals.contains_key(&s.id) {
                    continue;
                }
                let reached = if s.ui.wait_for_all_participants {
                    c.gates.contains_key(&s.id)
                } else {
                    self.state.live_members(c).any(|p| p.current_stage_index >= i)
                };
                if !reached {
                    continue;
                }
                match build_reveal(&s.id, r, &RevealView { state: &self.state, cohort: c }, now) {
                    Ok(snapshot) => todo.push((c.id.clone(), snapshot)),
                    Err(e) => tracing::debug!(cohort = %c.id, stage = %s.id, "reveal not ready: {e}"),
                }
            }
        }
        let changed = !todo.is_empty();
        for (c, snapshot) in todo {
            self.emit(Some(c), Actor::System, Event::RevealBuilt { snapshot }, now)?;
        }
        Ok(changed)
    }

    fn compute_payouts(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut todo = Vec::new();
        for p in self.state.participants.values() {
            if p.status.is_terminal() || self.state.payouts.contains_key(&p.public_id) {
                continue;
            }
            let Some(stage) = self.state.stage_at(p.current_stage_index) else { continue };
            let StageParams::Payout(params) = &stage.params else { continue };
            let cohort = &self.state.cohorts[&p.cohort_id];
            let view = PayoutView {
                state: &self.state,
                cohort,
                participant: p,
            };
            match compute_payout(&stage.id, params, &view, self.state.seed, PayoutMode::Final) {
                Ok(mut row) => {
                    row.external_id = p.external_id.clone();
                    row.completion_status = p.status.as_str().to_string();
                    todo.push((p.cohort_id.clone(), p.public_id.clone(), row));
                }
                Err(e) => tracing::debug!(participant = %p.public_id, "payout not ready: {e}"),
            }
        }
        let changed = !todo.is_empty();
        for (c, id, row) in todo {
            self.emit(Some(c), Actor::System, Event::PayoutComputed { public_id: id, row }, now)?;
        }
        Ok(changed)
    }

    fn progress_agents(&mut self, now: Timestamp) -> EngineResult<bool> {
        let ready: Vec<PublicId> = self
            .state
            .participants
            .values()
            .filter(|p| {
                p.status == ParticipantStatus::Active
                    && !p.stalled
                    && p.pending_task.is_none()
                    && p.agent_id.as_ref().is_some_and(|a| !self.agent_paused(a))
            })
            .map(|p| p.public_id.clone())
            .collect();
        let mut changed = false;
        for id in ready {
            let p = &self.state.participants[&id];
            let agent_id = p.agent_id.clone().expect("filtered to agents");
            let Some(stage) = self.state.stage_at(p.current_stage_index).cloned() else { continue };
            if !rules::gate_open(&self.state.cohorts[&p.cohort_id], &stage) {
                continue;
            }
            let cohort = p.cohort_id.clone();
            let actor = Actor::Agent { agent_id: agent_id.clone() };
            let answer = match &stage.params {
                StageParams::Transfer(_) => continue,
                StageParams::SurveyPerParticipant(_) => {
                    self.stall(&id, &stage.id, "agent participants cannot answer per-participant surveys", now)?;
                    changed = true;
                    continue;
                }
                StageParams::Survey(_) | StageParams::Comprehension(_) | StageParams::RankingElection(_) => {
                    if p.comprehension_attempts.get(&stage.id).copied().unwrap_or(0) >= MAX_STAGE_ATTEMPTS {
                        self.stall(&id, &stage.id, "comprehension attempts exhausted", now)?;
                    } else {
                        let task_id = self.state.counters.tasks + 1;
                        self.emit(
                            Some(cohort),
                            Actor::System,
                            Event::AgentTaskStarted {
                                public_id: id.clone(),
                                stage_id: stage.id.clone(),
                                task_id,
                            },
                            now,
                        )?;
                    }
                    changed = true;
                    continue;
                }
                StageParams::TermsOfService => Some(AnswerContent::Acknowledged),
                StageParams::Profile(pp) if pp.mode == ProfileMode::SelfChosen => {
                    let spec = self.state.config.agent(&agent_id).ok_or_else(|| EngineError::UnknownAgent(agent_id.clone()))?;
                    Some(AnswerContent::Profile {
                        profile: Profile {
                            display_name: spec.profile.display_name.clone(),
                            avatar: spec.profile.avatar.clone(),
                            pronouns: String::new(),
                        },
                    })
                }
                _ => None,
            };
            match self.advance_inner(actor, &id, answer, now) {
                Ok(()) => changed = true,
                Err(EngineError::GateBlocked { .. }) => {}
                Err(e @ (EngineError::Storage(_) | EngineError::Replay(_))) => return Err(e),
                Err(e) => {
                    self.stall(&id, &stage.id, &e.to_string(), now)?;
                    changed = true;
                }
            }
        }
        Ok(changed)
    }

    fn stall(&mut self, id: &PublicId, stage: &StageId, reason: &str, now: Timestamp) -> EngineResult<()> {
        let cohort = self.cohort_of(id)?;
        self.emit(
            Some(cohort.clone()),
            Actor::System,
            Event::AgentStalled {
                public_id: id.clone(),
                stage_id: stage.clone(),
                reason: reason.to_string(),
            },
            now,
        )?;
        self.emit(
            Some(cohort),
            Actor::System,
            Event::FacilitatorNotice {
                public_id: Some(id.clone()),
                message: format!("agent participant {id} stalled at '{stage}': {reason}"),
            },
            now,
        )
    }

    fn match_lobbies(&mut self, now: Timestamp) -> EngineResult<bool> {
        let mut lobbies: BTreeMap<(CohortId, usize), Vec<Waiting>> = BTreeMap::new();
        for c in self.state.cohorts.values() {
            for p in self.state.live_members(c) {
                if p.status != ParticipantStatus::Active {
                    continue;
                }
                let Some(stage) = self.state.stage_at(p.current_stage_index) else { continue };
                let StageParams::Transfer(t) = &stage.params else { continue };
                if !rules::gate_open(c, stage) {
                    continue;
                }
                let attribute = t.composition.first().and_then(|rule| {
                    let a = p.stage_answers.get(&rule.survey_stage_id)?;
                    match &a.content {
                        AnswerContent::Survey { answers } => answers.get(&rule.question_id).map(|v| v.key()),
                        _ => None,
                    }
                });
                lobbies.entry((c.id.clone(), p.current_stage_index)).or_default().push(Waiting {
                    public_id: p.public_id.clone(),
                    arrived_at: p.arrived_at.get(&p.current_stage_index).copied().unwrap_or(p.created_at),
                    attribute,
                });
            }
        }
        let mut changed = false;
        for ((from, idx), waiting) in lobbies {
            let StageParams::Transfer(t) = &self.state.stages()[idx].params else { continue };
            let result = match_lobby(&waiting, t, now);
            let name = self.state.cohorts[&from].name.clone();
            for members in result.groups {
                let to = CohortId::from(format!("{}-m{}", from, self.state.counters.cohorts + 1));
                self.emit(
                    Some(to.clone()),
                    Actor::System,
                    Event::CohortCreated {
                        cohort_id: to.clone(),
                        name: format!("{name} group"),
                    },
                    now,
                )?;
                self.emit(
                    Some(to.clone()),
                    Actor::System,
                    Event::LobbyMatched {
                        from: from.clone(),
                        to,
                        members,
                    },
                    now,
                )?;
                changed = true;
            }
            for id in result.timed_out {
                self.emit(
                    Some(from.clone()),
                    Actor::System,
                    Event::ParticipantCompleted {
                        public_id: id,
                        reason: CompletionReason::LobbyTimeout,
                        redirect_url: None,
                    },
                    now,
                )?;
                changed = true;
            }
        }
        Ok(changed)
    }

    fn complete_finished(&mut self, now: Timestamp) -> EngineResult<bool> {
        let n = self.state.stages().len();
        let done: Vec<PublicId> = self
            .state
            .participants
            .values()
            .filter(|p| !p.status.is_terminal() && p.current_stage_index >= n)
            .map(|p| p.public_id.clone())
            .collect();
        let changed = !done.is_empty();
        for id in done {
            self.complete_if_done(&id, Actor::System, now)?;
        }
        Ok(changed)
    }

    // ----- provider jobs -----

    fn creator(&self) -> ExperimenterId {
        self.state.config.creator().cloned().unwrap_or_else(|| ExperimenterId::from(""))
    }

    fn context_for(&self, cohort: &Cohort, agents: &[AgentSpec]) -> BTreeMap<StageId, crate::agent::prompt::StageContext> {
        let refs: Vec<StageId> = agents
            .iter()
            .flat_map(|a| a.prompt_plan.iter())
            .filter_map(|i| match i {
                PromptItem::StageContextRef { stage_id } => Some(stage_id.clone()),
                _ => None,
            })
            .collect();
        views::stage_context(&self.state, cohort, &refs)
    }

    /// Provider work not yet handed out. After a restart everything still
    /// outstanding is handed out again.
    pub fn take_jobs(&mut self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for c in self.state.cohorts.values() {
            for (key, chat) in &c.chats {
                let Slot::Calling { round_id } = chat.slot else { continue };
                let tag = (c.id.clone(), key.clone(), round_id);
                if self.issued_rounds.contains(&tag) {
                    continue;
                }
                let (stage_id, _) = split_chat_key(key);
                let Some(stage) = self.state.config.stage(&stage_id) else { continue };
                let params = stage.params.chat().cloned().unwrap_or_default();
                let agents = self.round_agents(c, key);
                let context = self.context_for(c, &agents);
                jobs.push(Job::Round(RoundJob {
                    chat: key.clone(),
                    request: RoundRequest {
                        round_id,
                        cohort_id: c.id.clone(),
                        stage: stage.clone(),
                        agents,
                        transcript: chat.messages.clone(),
                        context,
                        seed: self.state.seed,
                        throttle: params.wpm_throttling,
                        selection: params.selection,
                        creator: self.creator(),
                    },
                }));
                self.issued_rounds.insert(tag);
            }
        }
        for p in self.state.participants.values() {
            let Some(task_id) = p.pending_task else { continue };
            if self.issued_tasks.contains(&task_id) {
                continue;
            }
            let (Some(agent_id), Some(stage)) = (&p.agent_id, self.state.stage_at(p.current_stage_index)) else {
                continue;
            };
            let Some(spec) = self.state.config.agent(agent_id) else { continue };
            let mut spec = spec.clone();
            spec.profile.display_name = p.display_name();
            let cohort = &self.state.cohorts[&p.cohort_id];
            let candidates = match &stage.params {
                StageParams::RankingElection(e) => rules::election_candidates(&self.state, cohort, e, &p.public_id),
                _ => Vec::new(),
            };
            let context = self.context_for(cohort, std::slice::from_ref(&spec));
            jobs.push(Job::Stage(StageJob {
                public_id: p.public_id.clone(),
                task: StageTask {
                    cohort_id: p.cohort_id.clone(),
                    spec,
                    stage: stage.clone(),
                    candidates,
                    context,
                    creator: self.creator(),
                    task_id,
                },
            }));
            self.issued_tasks.insert(task_id);
        }
        jobs
    }

    fn log_calls(&mut self, cohort: &CohortId, logs: Vec<AgentCallLog>, now: Timestamp) -> EngineResult<()> {
        for log in logs {
            let actor = Actor::Agent {
                agent_id: log.agent_id.clone(),
            };
            self.emit(Some(cohort.clone()), actor, Event::AgentCallLogged { log }, now)?;
        }
        Ok(())
    }

    /// Records a finished round. Call logs are always kept; the selection
    /// only applies while the round is still the chat's current one.
    pub fn finish_round(&mut self, job: &RoundJob, outcome: RoundOutcome, now: Timestamp) -> EngineResult<()> {
        let cohort = job.request.cohort_id.clone();
        let round_id = job.request.round_id;
        self.issued_rounds.remove(&(cohort.clone(), job.chat.clone(), round_id));
        self.log_calls(&cohort, outcome.logs, now)?;
        let Some(chat) = self.state.cohorts.get(&cohort).and_then(|c| c.chats.get(&job.chat)) else {
            return Ok(());
        };
        if chat.slot != (Slot::Calling { round_id }) {
            return Ok(());
        }
        let winner = if chat.ended { None } else { outcome.winner };
        self.emit(
            Some(cohort),
            Actor::System,
            Event::AgentRoundResolved {
                stage_id: job.chat.clone(),
                round_id,
                winner,
                readiness: outcome.readiness,
            },
            now,
        )?;
        self.settle(now)
    }

    pub fn finish_stage_task(
        &mut self,
        job: &StageJob,
        result: Result<StageAction, AgentStageError>,
        logs: Vec<AgentCallLog>,
        now: Timestamp,
    ) -> EngineResult<()> {
        self.issued_tasks.remove(&job.task.task_id);
        let cohort = self.cohort_of(&job.public_id)?;
        self.log_calls(&cohort, logs, now)?;
        let p = self.participant(&job.public_id)?;
        if p.pending_task != Some(job.task.task_id) {
            return Ok(());
        }
        let actor = Actor::Agent {
            agent_id: job.task.spec.id.clone(),
        };
        let stage = job.task.stage.id.clone();
        match result {
            Ok(action) => {
                let answer = match action {
                    StageAction::Advance => None,
                    StageAction::Submit(a) => Some(a),
                };
                match self.advance_inner(actor, &job.public_id, answer, now) {
                    Ok(()) | Err(EngineError::ComprehensionFailed { .. }) => {}
                    Err(e @ (EngineError::Storage(_) | EngineError::Replay(_))) => return Err(e),
                    Err(e) => self.stall(&job.public_id, &stage, &e.to_string(), now)?,
                }
            }
            Err(e) => self.stall(&job.public_id, &stage, &e.to_string(), now)?,
        }
        self.settle(now)
    }
}

#[cfg(test)]
mod tests;
