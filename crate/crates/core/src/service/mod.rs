//! Transport-independent service: sessions, authorization, action routing
//! and stream fan-out over a set of experiments. The HTTP server and the
//! simulator both drive a [`Hub`].

pub mod auth;
pub mod frames;
pub mod view;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::handraise::{AgentCallLog, AgentStageError, RoundOutcome, StageAction};
use crate::agent::spec::AgentSpec;
use crate::engine::event::Actor;
use crate::engine::{Engine, EngineError, Job, RoundJob, StageJob};
use crate::ids::{derive_seed, AgentId, CohortId, ExperimentId, ExperimenterId, IdGen, PrivateId, PublicId};
use crate::llm::{Gateway, KeyStoreError};
use crate::model::answer::AnswerContent;
use crate::model::config::{AccessRole, ExperimentConfig, Metadata};
use crate::model::stage::StageConfig;
use crate::presence::{CheckState, PresenceState};
use crate::store::export::{export_archive, export_payout_csv, ExportError};
use crate::store::log::{restore, FileSink, StorageError};
use crate::time::{Clock, Timestamp};

pub use auth::{token_hash, Allowlist, AllowlistEntry, AllowlistError, Session};
pub use frames::{participant_receives, project, Frame, Subscription, Topic};
pub use view::{dashboard, participant_view, search_participants, Dashboard, ParticipantView, SearchHit};

pub const EXPERIMENTS_DIR: &str = "experiments";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("authentication required")]
    Unauthenticated,
    #[error("permission denied")]
    PermissionDenied,
    #[error("unknown experiment '{0}'")]
    UnknownExperiment(ExperimentId),
    #[error("experiment '{0}' already exists")]
    AlreadyExists(ExperimentId),
    #[error("unknown private id")]
    UnknownPrivateId,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Keys(#[from] KeyStoreError),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthenticated => "unauthenticated",
            ServiceError::PermissionDenied => "permissionDenied",
            ServiceError::UnknownExperiment(_) => "unknownExperiment",
            ServiceError::AlreadyExists(_) => "alreadyExists",
            ServiceError::UnknownPrivateId => "unknownPrivateId",
            ServiceError::BadRequest(_) => "badRequest",
            ServiceError::Engine(e) => e.code(),
            ServiceError::Export(ExportError::NoPayoutStage) => "noPayoutStage",
            ServiceError::Export(_) => "exportFailure",
            ServiceError::Storage(_) => "storageFailure",
            ServiceError::Keys(KeyStoreError::PermissionDenied { .. }) => "permissionDenied",
            ServiceError::Keys(_) => "keyStoreFailure",
        }
    }

    /// HTTP status for the error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Unauthenticated => 401,
            ServiceError::PermissionDenied | ServiceError::Keys(KeyStoreError::PermissionDenied { .. }) => 403,
            ServiceError::UnknownExperiment(_) | ServiceError::UnknownPrivateId => 404,
            ServiceError::AlreadyExists(_) => 409,
            ServiceError::BadRequest(_) | ServiceError::Export(ExportError::NoPayoutStage) => 400,
            ServiceError::Engine(e) => match e {
                EngineError::Storage(_) | EngineError::Replay(_) => 500,
                EngineError::UnknownParticipant(_)
                | EngineError::UnknownPrivateId
                | EngineError::UnknownCohort(_)
                | EngineError::UnknownAgent(_)
                | EngineError::UnknownAlert(_) => 404,
                _ => 409,
            },
            _ => 500,
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

fn default_true() -> bool {
    true
}

/// Actions a participant (or an experimenter on their behalf) can take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ParticipantAction {
    /// Submit the current stage and move on.
    SubmitAnswer {
        #[serde(default)]
        answer: Option<AnswerContent>,
    },
    SaveDraft {
        answer: AnswerContent,
    },
    SendChatMessage {
        text: String,
    },
    EndChatVote,
    RespondTransfer {
        accept: bool,
    },
    AcknowledgeAttentionCheck,
    RaiseAlert {
        text: String,
    },
    Heartbeat {
        #[serde(default = "default_true")]
        active: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ExperimenterAction {
    CreateExperiment {
        config: ExperimentConfig,
        #[serde(default)]
        seed: Option<u64>,
    },
    EditMetadata {
        experiment_id: ExperimentId,
        metadata: Metadata,
    },
    EditStages {
        experiment_id: ExperimentId,
        stages: Vec<StageConfig>,
    },
    CreateCohort {
        experiment_id: ExperimentId,
        name: String,
    },
    LockCohort {
        experiment_id: ExperimentId,
        cohort_id: CohortId,
    },
    CreateParticipant {
        experiment_id: ExperimentId,
        cohort_id: CohortId,
        #[serde(default)]
        external_id: Option<String>,
        #[serde(default)]
        agent_id: Option<AgentId>,
    },
    CreateTransferOffer {
        experiment_id: ExperimentId,
        public_id: PublicId,
        to_cohort_id: CohortId,
    },
    Boot {
        experiment_id: ExperimentId,
        public_id: PublicId,
    },
    SendAttentionCheck {
        experiment_id: ExperimentId,
        public_id: PublicId,
        #[serde(default = "default_check_seconds")]
        deadline_seconds: u32,
    },
    MessageParticipant {
        experiment_id: ExperimentId,
        public_id: PublicId,
        text: String,
    },
    ResolveAlert {
        experiment_id: ExperimentId,
        alert_id: String,
        response: String,
    },
    PauseAgent {
        experiment_id: ExperimentId,
        agent_id: AgentId,
        paused: bool,
    },
    EditAgentSpec {
        experiment_id: ExperimentId,
        spec: AgentSpec,
    },
    RegisterApiKey {
        provider_id: String,
        key: String,
    },
    SearchParticipant {
        experiment_id: ExperimentId,
        query: String,
    },
    Dashboard {
        experiment_id: ExperimentId,
    },
    ViewAs {
        experiment_id: ExperimentId,
        public_id: PublicId,
    },
    ActOnBehalf {
        experiment_id: ExperimentId,
        public_id: PublicId,
        act: ParticipantAction,
    },
    Export {
        experiment_id: ExperimentId,
    },
    ExportPayouts {
        experiment_id: ExperimentId,
    },
}

fn default_check_seconds() -> u32 {
    60
}

impl ExperimenterAction {
    /// Experiment the action targets and the role it needs there. `None`
    /// for actions that are not scoped to an experiment.
    pub fn requirement(&self) -> Option<(&ExperimentId, AccessRole)> {
        use ExperimenterAction::*;
        match self {
            CreateExperiment { .. } | RegisterApiKey { .. } => None,
            SearchParticipant { experiment_id, .. }
            | Dashboard { experiment_id }
            | Export { experiment_id }
            | ExportPayouts { experiment_id } => Some((experiment_id, AccessRole::Reader)),
            EditMetadata { experiment_id, .. }
            | EditStages { experiment_id, .. }
            | CreateCohort { experiment_id, .. }
            | LockCohort { experiment_id, .. }
            | CreateParticipant { experiment_id, .. }
            | CreateTransferOffer { experiment_id, .. }
            | Boot { experiment_id, .. }
            | SendAttentionCheck { experiment_id, .. }
            | MessageParticipant { experiment_id, .. }
            | ResolveAlert { experiment_id, .. }
            | PauseAgent { experiment_id, .. }
            | EditAgentSpec { experiment_id, .. }
            | ViewAs { experiment_id, .. }
            | ActOnBehalf { experiment_id, .. } => Some((experiment_id, AccessRole::Editor)),
        }
    }
}

/// Result of an action.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "result", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Outcome {
    /// Applied. `applied` is the log length afterwards and `sequence` the
    /// last sequence number in the participant's cohort stream.
    Ack {
        applied: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        sequence: Option<u64>,
    },
    ExperimentCreated {
        experiment_id: ExperimentId,
    },
    CohortCreated {
        cohort_id: CohortId,
    },
    /// The only place a private id leaves the service: back to the
    /// experimenter who created the participant.
    ParticipantCreated {
        public_id: PublicId,
        private_id: String,
        join_path: String,
    },
    OfferCreated {
        offer_id: String,
    },
    CheckSent {
        check_id: String,
    },
    CheckResolved {
        state: CheckState,
    },
    AlertRaised {
        alert_id: String,
    },
    Presence {
        presence: PresenceState,
    },
    KeyRegistered {
        key_ref: String,
    },
    Search {
        hits: Vec<SearchHit>,
    },
    Dashboard {
        dashboard: Dashboard,
    },
    View {
        view: Box<ParticipantView>,
    },
    #[serde(skip_serializing)]
    Archive { bytes: Vec<u8> },
    #[serde(skip_serializing)]
    Csv { bytes: Vec<u8> },
}

#[derive(Debug, Clone, Default)]
pub struct HubOptions {
    /// Root for persisted experiments; in-memory when `None`.
    pub data_dir: Option<PathBuf>,
    /// fsync every appended record.
    pub sync: bool,
    /// Seed for id generation (simulation). Live service uses OS entropy.
    pub id_seed: Option<u64>,
}

pub struct Hub {
    experiments: BTreeMap<ExperimentId, Engine>,
    allowlist: Allowlist,
    gateway: Arc<Gateway>,
    clock: Arc<dyn Clock>,
    options: HubOptions,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub")
            .field("experiments", &self.experiments.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn valid_experiment_id(id: &ExperimentId) -> bool {
    let s = id.as_str();
    !s.is_empty()
        && s.len() <= 64
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Hub {
    pub fn new(allowlist: Allowlist, gateway: Arc<Gateway>, clock: Arc<dyn Clock>, options: HubOptions) -> Self {
        Hub {
            experiments: BTreeMap::new(),
            allowlist,
            gateway,
            clock,
            options,
        }
    }

    /// Restores every persisted experiment under the data directory.
    pub fn load(&mut self) -> ServiceResult<usize> {
        let Some(root) = self.options.data_dir.clone() else { return Ok(0) };
        let root = root.join(EXPERIMENTS_DIR);
        let entries = match std::fs::read_dir(&root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(source) => return Err(StorageError::Io { path: root, source }.into()),
        };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        dirs.sort();
        let mut n = 0;
        for dir in dirs {
            if !dir.join(crate::store::log::EVENTS_FILE).exists() {
                continue;
            }
            let (state, records) = restore(&dir)?;
            let id = state.config.id.clone();
            let ids = self.id_gen(&id, state.applied);
            let sink = FileSink::open(&dir, self.options.sync)?;
            let mut engine = Engine::resume(records, Some(state), ids, Some(Box::new(sink)))?;
            engine.settle(self.now())?;
            self.experiments.insert(id, engine);
            n += 1;
        }
        Ok(n)
    }

    fn id_gen(&self, experiment: &ExperimentId, applied: u64) -> IdGen {
        match self.options.id_seed {
            Some(seed) => IdGen::seeded(derive_seed(seed, &["ids", experiment.as_str(), &applied.to_string()])),
            None => IdGen::from_entropy(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        self.gateway.clone()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn engine(&self, id: &ExperimentId) -> Option<&Engine> {
        self.experiments.get(id)
    }

    pub fn experiment_ids(&self) -> impl Iterator<Item = &ExperimentId> {
        self.experiments.keys()
    }

    fn engine_mut(&mut self, id: &ExperimentId) -> ServiceResult<&mut Engine> {
        self.experiments
            .get_mut(id)
            .ok_or_else(|| ServiceError::UnknownExperiment(id.clone()))
    }

    pub fn authenticate(&self, token: &str) -> ServiceResult<Session> {
        self.allowlist
            .authenticate(token)
            .map(|id| Session::Experimenter { id: id.clone() })
            .ok_or(ServiceError::Unauthenticated)
    }

    fn role(&self, who: &ExperimenterId, experiment: &ExperimentId) -> ServiceResult<AccessRole> {
        let e = self
            .experiments
            .get(experiment)
            .ok_or_else(|| ServiceError::UnknownExperiment(experiment.clone()))?;
        e.state().config.role_of(who).ok_or(ServiceError::PermissionDenied)
    }

    fn require(&self, who: &ExperimenterId, experiment: &ExperimentId, needed: AccessRole) -> ServiceResult<()> {
        if self.role(who, experiment)? >= needed {
            Ok(())
        } else {
            Err(ServiceError::PermissionDenied)
        }
    }

    /// Resolves a join link. The caller is responsible for uniform response
    /// timing.
    pub fn join(&mut self, private_id: &str) -> ServiceResult<(Session, ParticipantView)> {
        let digest = PrivateId::new(private_id).digest();
        let now = self.now();
        let experiment = self
            .experiments
            .iter()
            .find(|(_, e)| e.resolve_private_id(&digest).is_some())
            .map(|(id, _)| id.clone())
            .ok_or(ServiceError::UnknownPrivateId)?;
        let engine = self.engine_mut(&experiment)?;
        let public_id = engine.join(&digest, now)?;
        let view = participant_view(engine.state(), &public_id).ok_or(ServiceError::UnknownPrivateId)?;
        Ok((
            Session::Participant {
                experiment_id: experiment,
                public_id,
            },
            view,
        ))
    }

    /// Session for a join link without recording a join (for action
    /// endpoints that carry the private id).
    pub fn resolve(&self, private_id: &str) -> ServiceResult<Session> {
        let digest = PrivateId::new(private_id).digest();
        self.experiments
            .iter()
            .find_map(|(id, e)| {
                e.resolve_private_id(&digest).map(|p| Session::Participant {
                    experiment_id: id.clone(),
                    public_id: p.clone(),
                })
            })
            .ok_or(ServiceError::UnknownPrivateId)
    }

    pub fn view(&self, session: &Session) -> ServiceResult<ParticipantView> {
        match session {
            Session::Participant {
                experiment_id,
                public_id,
            } => {
                let e = self
                    .experiments
                    .get(experiment_id)
                    .ok_or_else(|| ServiceError::UnknownExperiment(experiment_id.clone()))?;
                participant_view(e.state(), public_id).ok_or(ServiceError::UnknownPrivateId)
            }
            Session::Experimenter { .. } => Err(ServiceError::PermissionDenied),
        }
    }

    /// Applies a participant action from a participant session.
    pub fn participant_action(&mut self, session: &Session, action: ParticipantAction) -> ServiceResult<Outcome> {
        let Session::Participant {
            experiment_id,
            public_id,
        } = session
        else {
            return Err(ServiceError::PermissionDenied);
        };
        let actor = Actor::Participant {
            public_id: public_id.clone(),
        };
        let (e, p) = (experiment_id.clone(), public_id.clone());
        self.apply_participant_action(&e, &p, actor, action)
    }

    fn apply_participant_action(
        &mut self,
        experiment: &ExperimentId,
        id: &PublicId,
        actor: Actor,
        action: ParticipantAction,
    ) -> ServiceResult<Outcome> {
        let now = self.now();
        let engine = self.engine_mut(experiment)?;
        let outcome = match action {
            ParticipantAction::SubmitAnswer { answer } => {
                engine.advance(actor, id, answer, now)?;
                None
            }
            ParticipantAction::SaveDraft { answer } => {
                engine.save_draft(actor, id, answer, now)?;
                None
            }
            ParticipantAction::SendChatMessage { text } => {
                engine.send_chat(actor, id, &text, now)?;
                None
            }
            ParticipantAction::EndChatVote => {
                engine.vote_end_chat(actor, id, now)?;
                None
            }
            ParticipantAction::RespondTransfer { accept } => {
                engine.respond_transfer(actor, id, accept, now)?;
                None
            }
            ParticipantAction::AcknowledgeAttentionCheck => Some(Outcome::CheckResolved {
                state: engine.acknowledge_attention_check(id, now)?,
            }),
            ParticipantAction::RaiseAlert { text } => Some(Outcome::AlertRaised {
                alert_id: engine.raise_alert(actor, id, &text, now)?,
            }),
            ParticipantAction::Heartbeat { active } => Some(Outcome::Presence {
                presence: engine.heartbeat(id, active, now)?,
            }),
        };
        Ok(outcome.unwrap_or_else(|| ack(engine, Some(id))))
    }

    /// Applies an experimenter action. Roles are checked before anything
    /// is appended.
    pub fn experimenter_action(&mut self, session: &Session, action: ExperimenterAction) -> ServiceResult<Outcome> {
        let Session::Experimenter { id: who } = session else {
            return Err(ServiceError::PermissionDenied);
        };
        if let Some((experiment, needed)) = action.requirement() {
            self.require(who, experiment, needed)?;
        }
        let now = self.now();
        let actor = Actor::Experimenter { id: who.clone() };
        use ExperimenterAction as A;
        match action {
            A::CreateExperiment { config, seed } => self.create_experiment(who, config, seed),
            A::RegisterApiKey { provider_id, key } => {
                let key_ref = self.gateway.register_api_key(who, who, &provider_id, &key)?;
                Ok(Outcome::KeyRegistered { key_ref: key_ref.0 })
            }
            A::EditMetadata {
                experiment_id,
                metadata,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                e.edit_metadata(actor, metadata, now)?;
                Ok(ack(e, None))
            }
            A::EditStages { experiment_id, stages } => {
                let e = self.engine_mut(&experiment_id)?;
                e.edit_stages(actor, stages, now)?;
                Ok(ack(e, None))
            }
            A::CreateCohort { experiment_id, name } => {
                let cohort_id = self.engine_mut(&experiment_id)?.create_cohort(actor, &name, now)?;
                Ok(Outcome::CohortCreated { cohort_id })
            }
            A::LockCohort {
                experiment_id,
                cohort_id,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                e.lock_cohort(actor, &cohort_id, now)?;
                Ok(ack(e, None))
            }
            A::CreateParticipant {
                experiment_id,
                cohort_id,
                external_id,
                agent_id,
            } => {
                let np = self
                    .engine_mut(&experiment_id)?
                    .add_participant(actor, &cohort_id, external_id, agent_id, now)?;
                let private_id = np.private_id.expose().to_string();
                Ok(Outcome::ParticipantCreated {
                    public_id: np.public_id,
                    join_path: format!("/join/{private_id}"),
                    private_id,
                })
            }
            A::CreateTransferOffer {
                experiment_id,
                public_id,
                to_cohort_id,
            } => {
                let offer_id = self
                    .engine_mut(&experiment_id)?
                    .offer_transfer(actor, &public_id, &to_cohort_id, now)?;
                Ok(Outcome::OfferCreated { offer_id })
            }
            A::Boot {
                experiment_id,
                public_id,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                e.boot(actor, &public_id, now)?;
                Ok(ack(e, Some(&public_id)))
            }
            A::SendAttentionCheck {
                experiment_id,
                public_id,
                deadline_seconds,
            } => {
                let check_id = self
                    .engine_mut(&experiment_id)?
                    .send_attention_check(actor, &public_id, deadline_seconds, now)?;
                Ok(Outcome::CheckSent { check_id })
            }
            A::MessageParticipant {
                experiment_id,
                public_id,
                text,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                e.message_participant(actor, &public_id, &text, now)?;
                Ok(ack(e, Some(&public_id)))
            }
            A::ResolveAlert {
                experiment_id,
                alert_id,
                response,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                e.resolve_alert(actor, &alert_id, &response, now)?;
                Ok(ack(e, None))
            }
            A::PauseAgent {
                experiment_id,
                agent_id,
                paused,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                e.pause_agent(actor, &agent_id, paused, now)?;
                Ok(ack(e, None))
            }
            A::EditAgentSpec { experiment_id, spec } => {
                let e = self.engine_mut(&experiment_id)?;
                e.edit_agent_spec(actor, spec, now)?;
                Ok(ack(e, None))
            }
            A::SearchParticipant { experiment_id, query } => {
                let e = self.engine_mut(&experiment_id)?;
                Ok(Outcome::Search {
                    hits: search_participants(e.state(), &query),
                })
            }
            A::Dashboard { experiment_id } => {
                let e = self.engine_mut(&experiment_id)?;
                Ok(Outcome::Dashboard {
                    dashboard: dashboard(e, now),
                })
            }
            A::ViewAs {
                experiment_id,
                public_id,
            } => {
                let e = self.engine_mut(&experiment_id)?;
                let view = participant_view(e.state(), &public_id)
                    .ok_or_else(|| EngineError::UnknownParticipant(public_id.clone()))?;
                Ok(Outcome::View { view: Box::new(view) })
            }
            A::ActOnBehalf {
                experiment_id,
                public_id,
                act,
            } => {
                let actor = Actor::OnBehalf {
                    experimenter: who.clone(),
                    public_id: public_id.clone(),
                };
                self.apply_participant_action(&experiment_id, &public_id, actor, act)
            }
            A::Export { experiment_id } => {
                let e = self.engine_mut(&experiment_id)?;
                Ok(Outcome::Archive {
                    bytes: export_archive(e.state(), e.records())?,
                })
            }
            A::ExportPayouts { experiment_id } => {
                let e = self.engine_mut(&experiment_id)?;
                Ok(Outcome::Csv {
                    bytes: export_payout_csv(e.state())?,
                })
            }
        }
    }

    fn create_experiment(&mut self, who: &ExperimenterId, mut config: ExperimentConfig, seed: Option<u64>) -> ServiceResult<Outcome> {
        let id = config.id.clone();
        if !valid_experiment_id(&id) {
            return Err(ServiceError::BadRequest(format!("experiment id '{id}' must be 1-64 of [A-Za-z0-9._-]")));
        }
        if self.experiments.contains_key(&id) {
            return Err(ServiceError::AlreadyExists(id));
        }
        // The caller becomes the creator; any other creator entry is kept as
        // an editor.
        for role in config.roles.values_mut() {
            if *role == AccessRole::Creator {
                *role = AccessRole::Editor;
            }
        }
        config.roles.insert(who.clone(), AccessRole::Creator);
        let mut ids = self.id_gen(&id, 0);
        let seed = seed.unwrap_or_else(|| ids.next_u64());
        let sink: Option<Box<dyn crate::store::log::EventSink>> = match &self.options.data_dir {
            Some(root) => {
                let dir = root.join(EXPERIMENTS_DIR).join(id.as_str());
                if dir.join(crate::store::log::EVENTS_FILE).exists() {
                    return Err(ServiceError::AlreadyExists(id));
                }
                Some(Box::new(FileSink::open(&dir, self.options.sync)?))
            }
            None => None,
        };
        let engine = Engine::create(config, seed, ids, sink, self.now())?;
        self.experiments.insert(id.clone(), engine);
        Ok(Outcome::ExperimentCreated { experiment_id: id })
    }

    /// Installs an experiment directly (simulation and tests).
    pub fn insert_engine(&mut self, engine: Engine) -> ServiceResult<()> {
        let id = engine.state().config.id.clone();
        if self.experiments.contains_key(&id) {
            return Err(ServiceError::AlreadyExists(id));
        }
        self.experiments.insert(id, engine);
        Ok(())
    }

    /// Runs timers and deliveries on every experiment.
    pub fn tick(&mut self) -> ServiceResult<()> {
        let now = self.now();
        for e in self.experiments.values_mut() {
            e.tick(now)?;
        }
        Ok(())
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.experiments.values().filter_map(|e| e.next_deadline()).min()
    }

    pub fn take_jobs(&mut self) -> Vec<(ExperimentId, Job)> {
        let mut out = Vec::new();
        for (id, e) in self.experiments.iter_mut() {
            out.extend(e.take_jobs().into_iter().map(|j| (id.clone(), j)));
        }
        out
    }

    pub fn finish_round(&mut self, experiment: &ExperimentId, job: &RoundJob, outcome: RoundOutcome) -> ServiceResult<()> {
        let now = self.now();
        self.engine_mut(experiment)?.finish_round(job, outcome, now)?;
        Ok(())
    }

    pub fn finish_stage_task(
        &mut self,
        experiment: &ExperimentId,
        job: &StageJob,
        result: Result<StageAction, AgentStageError>,
        logs: Vec<AgentCallLog>,
    ) -> ServiceResult<()> {
        let now = self.now();
        self.engine_mut(experiment)?.finish_stage_task(job, result, logs, now)?;
        Ok(())
    }

    /// Frames for everything appended since the last call.
    pub fn drain_frames(&mut self) -> Vec<Frame> {
        let mut out = Vec::new();
        for (id, e) in self.experiments.iter_mut() {
            let records = e.drain_outbox();
            for r in &records {
                out.extend(project(e.state(), id, r));
            }
        }
        out
    }

    /// Checks a subscription request.
    pub fn authorize(&self, session: &Session, sub: &Subscription) -> ServiceResult<()> {
        match (session, sub) {
            (Session::Experimenter { id }, Subscription::Topic(t)) => self.require(id, t.experiment_id(), AccessRole::Reader),
            (Session::Experimenter { id }, Subscription::Mirror { experiment_id, .. }) => {
                self.require(id, experiment_id, AccessRole::Editor)
            }
            (Session::Participant { experiment_id, .. }, Subscription::Topic(t)) => {
                let e = self
                    .experiments
                    .get(experiment_id)
                    .ok_or_else(|| ServiceError::UnknownExperiment(experiment_id.clone()))?;
                if frames::participant_may_subscribe(session, t, e.state()) {
                    Ok(())
                } else {
                    Err(ServiceError::PermissionDenied)
                }
            }
            (Session::Participant { .. }, Subscription::Mirror { .. }) => Err(ServiceError::PermissionDenied),
        }
    }

    /// Whether a session with the given (already authorized) subscriptions
    /// receives `frame`. Participants always receive their own topics.
    pub fn receives(&self, session: &Session, subs: &BTreeSet<Subscription>, frame: &Frame) -> bool {
        let state_of = |exp: &ExperimentId| self.experiments.get(exp).map(|e| e.state());
        match session {
            Session::Participant {
                experiment_id,
                public_id,
            } => state_of(experiment_id).is_some_and(|s| participant_receives(s, experiment_id, public_id, frame)),
            Session::Experimenter { .. } => subs.iter().any(|sub| match sub {
                Subscription::Topic(t) => t == &frame.topic,
                Subscription::Mirror {
                    experiment_id,
                    public_id,
                } => state_of(experiment_id).is_some_and(|s| participant_receives(s, experiment_id, public_id, frame)),
            }),
        }
    }
}

fn ack(engine: &Engine, participant: Option<&PublicId>) -> Outcome {
    let cohort = participant.and_then(|p| engine.state().participants.get(p)).map(|p| p.cohort_id.clone());
    let sequence = engine
        .records()
        .iter()
        .rev()
        .find(|r| cohort.is_none() || r.cohort_id == cohort)
        .map(|r| r.sequence);
    Outcome::Ack {
        applied: engine.state().applied,
        sequence,
    }
}
