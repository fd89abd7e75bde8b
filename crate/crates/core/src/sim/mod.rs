//! Headless simulation: scripted participants and a scripted provider
//! driven through a [`Hub`] under a virtual clock that jumps straight to
//! the next due event.

pub mod plan;
pub mod taint;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::agent::handraise::{complete_agent_stage, run_hand_raising_round};
use crate::engine::{chat_key, Job};
use crate::ids::{derive_seed, seeded_rng, ExperimentId, ExperimenterId, PublicId, StageId};
use crate::llm::scripted::{ScriptError, ScriptedProvider};
use crate::llm::{Gateway, KeyStore, MasterKey};
use crate::model::answer::{AnswerContent, SubjectAnswer};
use crate::model::stage::StageParams;
use crate::money::Money;
use crate::service::{
    Allowlist, ExperimenterAction, Hub, HubOptions, Outcome, ParticipantAction, ParticipantView, ServiceError, Session,
};
use crate::store::export::{export_archive, export_payout_csv, ExportError};
use crate::time::{Clock, ManualClock, Timestamp};

pub use plan::{
    requires_answer, AttentionCheckPlan, Jitter, LoadedPlan, ParticipantScript, PlanIssue, RankingRule, SimulationPlan,
    StageScript, StopCondition,
};

/// Virtual start time of every simulation (2024-01-01T00:00:00Z).
pub const SIM_EPOCH: Timestamp = Timestamp::from_secs(1_704_067_200);
/// Provider id scripted responses are registered under.
pub const SCRIPTED_PROVIDER: &str = "scripted";
const SIM_EXPERIMENTER: &str = "simulator@localhost";
const RETRY_SECONDS: i64 = 5;
const PUMP_LIMIT: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("experiment config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid plan: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Plan(Vec<PlanIssue>),
    #[error("provider script: {0}")]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("agent jobs did not drain")]
    Runaway,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Running,
    Finished,
    TimedOut,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Persist the experiment log here.
    pub data_dir: Option<PathBuf>,
    /// Keep every participant-visible payload for scanning.
    pub capture_participant_payloads: bool,
}

struct Bot {
    script: usize,
    private_id: String,
    public_id: PublicId,
    session: Option<Session>,
    next_at: Option<Timestamp>,
    rng: ChaCha20Rng,
    sent: BTreeMap<StageId, usize>,
    voted: BTreeSet<StageId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimSummary {
    pub cohorts_total: usize,
    pub cohorts_completed: usize,
    pub participants: usize,
    pub messages: usize,
    pub payout_total: Money,
    pub currency_unit: String,
    pub sim_seconds: i64,
    pub records: usize,
    pub timed_out: bool,
}

impl fmt::Display for SimSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cohorts completed {}/{}, messages exchanged {}, payouts {} {} over {} participants, {} simulated seconds{}",
            self.cohorts_completed,
            self.cohorts_total,
            self.messages,
            self.payout_total,
            self.currency_unit,
            self.participants,
            self.sim_seconds,
            if self.timed_out { " (stopped at maxSimSeconds)" } else { "" },
        )
    }
}

pub struct Simulator {
    hub: Hub,
    clock: ManualClock,
    gateway: Arc<Gateway>,
    session: Session,
    experiment: ExperimentId,
    scripts: Vec<ParticipantScript>,
    bots: Vec<Bot>,
    checks: Vec<AttentionCheckPlan>,
    cap: Timestamp,
    payloads: Option<Vec<String>>,
    steps: u64,
    status: StepStatus,
}

impl fmt::Debug for Simulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulator")
            .field("experiment", &self.experiment)
            .field("bots", &self.bots.len())
            .field("steps", &self.steps)
            .finish()
    }
}

fn delay(rng: &mut ChaCha20Rng, j: Jitter) -> i64 {
    let secs = if j.max_seconds > j.min_seconds {
        rng.random_range(j.min_seconds..=j.max_seconds)
    } else {
        j.min_seconds
    };
    (secs * 1000.0).round() as i64
}

impl Simulator {
    /// Validates the plan, creates the experiment, its cohorts and
    /// participants, and schedules every join.
    pub fn new(loaded: &LoadedPlan, options: SimOptions) -> Result<Self, SimError> {
        let plan = &loaded.plan;
        let issues = plan.validate(&loaded.config);
        if !issues.is_empty() {
            return Err(SimError::Plan(issues));
        }
        let clock = ManualClock::new(SIM_EPOCH);
        let mut gateway = Gateway::new(
            KeyStore::in_memory(MasterKey::random()),
            Arc::new(clock.clone()),
            Arc::new(clock.clone()),
        );
        let provider = ScriptedProvider::new(loaded.provider_script.clone())?;
        gateway.register_provider(SCRIPTED_PROVIDER, "scripted://", Arc::new(provider));
        let gateway = Arc::new(gateway);
        let token = "simulator";
        let allow = Allowlist::default().with_token(SIM_EXPERIMENTER, token);
        let hub_options = HubOptions {
            data_dir: options.data_dir,
            sync: false,
            id_seed: Some(plan.seed),
        };
        let mut hub = Hub::new(allow, gateway.clone(), Arc::new(clock.clone()), hub_options);
        let session = hub.authenticate(token)?;

        // The plan owns the experiment: run it under the simulator identity.
        let mut config = loaded.config.clone();
        config.roles.clear();
        config
            .roles
            .insert(ExperimenterId::from(SIM_EXPERIMENTER), crate::model::config::AccessRole::Creator);
        let Outcome::ExperimentCreated { experiment_id } = hub.experimenter_action(
            &session,
            ExperimenterAction::CreateExperiment {
                config,
                seed: Some(plan.seed),
            },
        )?
        else {
            unreachable!("createExperiment returns ExperimentCreated")
        };

        let mut bots = Vec::new();
        for c in 0..plan.cohort_count {
            let Outcome::CohortCreated { cohort_id } = hub.experimenter_action(
                &session,
                ExperimenterAction::CreateCohort {
                    experiment_id: experiment_id.clone(),
                    name: format!("Cohort {}", c + 1),
                },
            )?
            else {
                unreachable!("createCohort returns CohortCreated")
            };
            for slot in 0..plan.per_cohort() {
                let Outcome::ParticipantCreated {
                    public_id, private_id, ..
                } = hub.experimenter_action(
                    &session,
                    ExperimenterAction::CreateParticipant {
                        experiment_id: experiment_id.clone(),
                        cohort_id: cohort_id.clone(),
                        external_id: Some(format!("SIM-{:03}-{}", c + 1, slot + 1)),
                        agent_id: None,
                    },
                )?
                else {
                    unreachable!("createParticipant returns ParticipantCreated")
                };
                let script = slot % plan.participant_scripts.len();
                let mut rng = seeded_rng(derive_seed(plan.seed, &["bot", &c.to_string(), &slot.to_string()]));
                let first = SIM_EPOCH.plus_millis(delay(&mut rng, plan.participant_scripts[script].timing_jitter));
                bots.push(Bot {
                    script,
                    private_id,
                    public_id,
                    session: None,
                    next_at: Some(first),
                    rng,
                    sent: BTreeMap::new(),
                    voted: BTreeSet::new(),
                });
            }
        }

        let mut checks = plan.attention_checks.clone();
        checks.sort_by_key(|c| c.at_seconds);
        Ok(Simulator {
            hub,
            clock,
            gateway,
            session,
            experiment: experiment_id,
            scripts: plan.participant_scripts.clone(),
            bots,
            checks,
            cap: SIM_EPOCH.plus_secs(plan.cap_seconds() as i64),
            payloads: options.capture_participant_payloads.then(Vec::new),
            steps: 0,
            status: StepStatus::Running,
        })
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    pub fn hub_mut(&mut self) -> &mut Hub {
        &mut self.hub
    }

    pub fn experimenter(&self) -> &Session {
        &self.session
    }

    pub fn experiment_id(&self) -> &ExperimentId {
        &self.experiment
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Every private id handed out, for leak scans.
    pub fn private_ids(&self) -> Vec<String> {
        self.bots.iter().map(|b| b.private_id.clone()).collect()
    }

    /// Serialized views and frames delivered to participants, if captured.
    pub fn participant_payloads(&self) -> &[String] {
        self.payloads.as_deref().unwrap_or(&[])
    }

    fn engine(&self) -> &crate::engine::Engine {
        self.hub.engine(&self.experiment).expect("simulated experiment exists")
    }

    fn all_terminal(&self) -> bool {
        self.engine()
            .state()
            .participants
            .values()
            .filter(|p| !p.is_agent())
            .all(|p| p.status.is_terminal())
    }

    /// One virtual instant: due checks, due participant actions, agent
    /// work, timers. Then the clock jumps to the next due thing.
    pub fn step(&mut self) -> Result<StepStatus, SimError> {
        if self.status != StepStatus::Running {
            return Ok(self.status);
        }
        self.steps += 1;
        let now = self.clock.now();

        while self.checks.first().is_some_and(|c| SIM_EPOCH.plus_secs(c.at_seconds as i64) <= now) {
            let check = self.checks.remove(0);
            self.send_checks(check)?;
        }

        let mut due: Vec<(Timestamp, usize)> = self
            .bots
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.next_at.filter(|t| *t <= now).map(|t| (t, i)))
            .collect();
        due.sort();
        for (_, i) in due {
            self.act(i)?;
            self.pump()?;
        }

        self.hub.tick()?;
        self.pump()?;
        self.capture_frames();

        if self.all_terminal() {
            self.status = StepStatus::Finished;
            return Ok(self.status);
        }
        let next = self
            .bots
            .iter()
            .filter_map(|b| b.next_at)
            .chain(self.hub.next_deadline())
            .chain(self.checks.first().map(|c| SIM_EPOCH.plus_secs(c.at_seconds as i64)))
            .min();
        let next = match next {
            Some(t) if t > now => t,
            // Overdue deadlines that did not fire, or nothing scheduled at
            // all: walk forward so the cap is reached.
            _ => now.plus_secs(1),
        };
        if next > self.cap {
            self.clock.set(self.cap);
            self.status = StepStatus::TimedOut;
            return Ok(self.status);
        }
        self.clock.set(next);
        Ok(StepStatus::Running)
    }

    pub fn run(&mut self) -> Result<StepStatus, SimError> {
        loop {
            match self.step()? {
                StepStatus::Running => {}
                done => return Ok(done),
            }
        }
    }

    /// The stop time was reached before every participant finished. An
    /// `allTerminal` plan that hits the safety cap counts too.
    pub fn timed_out(&self) -> bool {
        self.status == StepStatus::TimedOut
    }

    fn send_checks(&mut self, check: AttentionCheckPlan) -> Result<(), SimError> {
        let now = self.clock.now();
        let targets: Vec<usize> = self
            .bots
            .iter()
            .enumerate()
            .filter(|(_, b)| {
                b.session.is_some()
                    && self
                        .engine()
                        .state()
                        .participants
                        .get(&b.public_id)
                        .is_some_and(|p| !p.status.is_terminal())
            })
            .map(|(i, _)| i)
            .collect();
        for i in targets {
            self.hub.experimenter_action(
                &self.session,
                ExperimenterAction::SendAttentionCheck {
                    experiment_id: self.experiment.clone(),
                    public_id: self.bots[i].public_id.clone(),
                    deadline_seconds: check.deadline_seconds,
                },
            )?;
            let jitter = self.scripts[self.bots[i].script].timing_jitter;
            let bot = &mut self.bots[i];
            let soon = now.plus_millis(delay(&mut bot.rng, jitter));
            bot.next_at = Some(bot.next_at.map_or(soon, |t| t.min(soon)));
        }
        Ok(())
    }

    fn pump(&mut self) -> Result<(), SimError> {
        for _ in 0..PUMP_LIMIT {
            let jobs = self.hub.take_jobs();
            if jobs.is_empty() {
                return Ok(());
            }
            for (exp, job) in jobs {
                let now = self.clock.now();
                match job {
                    Job::Round(r) => {
                        let out = run_hand_raising_round(&r.request, &self.gateway, &self.clock);
                        self.clock.set(now);
                        self.hub.finish_round(&exp, &r, out)?;
                    }
                    Job::Stage(s) => {
                        let (res, logs) = complete_agent_stage(&s.task, &self.gateway, &self.clock);
                        self.clock.set(now);
                        self.hub.finish_stage_task(&exp, &s, res, logs)?;
                    }
                }
            }
        }
        Err(SimError::Runaway)
    }

    fn capture_frames(&mut self) {
        let frames = self.hub.drain_frames();
        let Some(payloads) = self.payloads.as_mut() else { return };
        let none = BTreeSet::new();
        for b in &self.bots {
            let Some(s) = &b.session else { continue };
            for f in frames.iter().filter(|f| self.hub.receives(s, &none, f)) {
                payloads.push(serde_json::to_string(f).unwrap_or_default());
            }
        }
    }

    fn record_view(&mut self, view: &ParticipantView) {
        if let Some(p) = self.payloads.as_mut() {
            p.push(serde_json::to_string(view).unwrap_or_default());
        }
    }

    fn schedule(&mut self, i: usize, extra_secs: i64) {
        let now = self.clock.now();
        let jitter = self.scripts[self.bots[i].script].timing_jitter;
        let bot = &mut self.bots[i];
        bot.next_at = Some(now.plus_millis(delay(&mut bot.rng, jitter) + extra_secs * 1000));
    }

    /// One scripted action for bot `i`.
    fn act(&mut self, i: usize) -> Result<(), SimError> {
        let Some(session) = self.bots[i].session.clone() else {
            let (session, view) = self.hub.join(&self.bots[i].private_id)?;
            self.record_view(&view);
            self.bots[i].session = Some(session);
            self.schedule(i, 0);
            return Ok(());
        };
        let view = self.hub.view(&session)?;
        self.record_view(&view);
        if view.status.is_terminal() {
            self.bots[i].next_at = None;
            return Ok(());
        }
        let script = &self.scripts[self.bots[i].script];
        let action = if view.pending_check.is_some() && script.acknowledge_attention_checks {
            Some(ParticipantAction::AcknowledgeAttentionCheck)
        } else if view.pending_offer.is_some() {
            Some(ParticipantAction::RespondTransfer {
                accept: script.accept_transfers,
            })
        } else {
            self.stage_action(i, &view)
        };
        let Some(action) = action else {
            self.bots[i].next_at = None;
            return Ok(());
        };
        let retry = match self.hub.participant_action(&session, action.clone()) {
            Ok(_) => {
                let bot = &mut self.bots[i];
                let stage = view.stages.get(view.current_stage_index).map(|s| s.id.clone());
                match (&action, stage) {
                    (ParticipantAction::SendChatMessage { .. }, Some(s)) => *bot.sent.entry(s).or_default() += 1,
                    (ParticipantAction::EndChatVote, Some(s)) => {
                        bot.voted.insert(s);
                    }
                    _ => {}
                }
                0
            }
            // Waiting on a gate, a chat, an agent or peers: try again later.
            Err(ServiceError::Engine(_)) => RETRY_SECONDS,
            Err(e) => return Err(e.into()),
        };
        self.schedule(i, retry);
        Ok(())
    }

    fn stage_action(&self, i: usize, view: &ParticipantView) -> Option<ParticipantAction> {
        let bot = &self.bots[i];
        let script = &self.scripts[bot.script];
        let stage = view.stages.get(view.current_stage_index)?;
        let ss = script.stages.get(&stage.id).cloned().unwrap_or_default();
        if ss.drop_out {
            return None;
        }
        let submit = |answer| Some(ParticipantAction::SubmitAnswer { answer });
        let params = &self.engine().state().stage_at(view.current_stage_index)?.params;
        match params {
            StageParams::GroupChat(_) | StageParams::PrivateChat(_) => {
                let sent = bot.sent.get(&stage.id).copied().unwrap_or(0);
                let cfg = self.engine().state().stage_at(view.current_stage_index)?;
                let key = chat_key(cfg, &bot.public_id);
                let ended = view.chats.iter().any(|c| c.chat == key && c.ended);
                if ended {
                    submit(None)
                } else if sent < ss.messages.len() {
                    Some(ParticipantAction::SendChatMessage {
                        text: ss.messages[sent].clone(),
                    })
                } else if !bot.voted.contains(&stage.id) {
                    Some(ParticipantAction::EndChatVote)
                } else {
                    submit(None)
                }
            }
            StageParams::RankingElection(_) => {
                if let Some(a) = ss.answer {
                    return submit(Some(a));
                }
                let mut ranking = view.candidates.clone();
                if ss.ranking == Some(RankingRule::Reversed) {
                    ranking.reverse();
                }
                submit(Some(AnswerContent::Ranking { ranking }))
            }
            StageParams::SurveyPerParticipant(_) => {
                let template = ss.answer.as_ref().and_then(|a| a.survey_answers().cloned()).unwrap_or_default();
                let answers = view
                    .rendered_questions
                    .iter()
                    .filter_map(|q| {
                        template.get(&q.question_id).map(|v| SubjectAnswer {
                            question_id: q.question_id.clone(),
                            subject: q.subject.clone(),
                            value: v.clone(),
                        })
                    })
                    .collect();
                submit(Some(AnswerContent::PerParticipant { answers }))
            }
            StageParams::Profile(_) => match (&ss.answer, &script.profile) {
                (Some(a), _) => submit(Some(a.clone())),
                (None, Some(p)) => submit(Some(AnswerContent::Profile { profile: p.clone() })),
                (None, None) => submit(None),
            },
            _ => submit(ss.answer),
        }
    }

    pub fn summary(&self) -> SimSummary {
        let state = self.engine().state();
        let cohorts_completed = state
            .cohorts
            .values()
            .filter(|c| state.members(c).filter(|p| !p.is_agent()).all(|p| p.status.is_terminal()))
            .count();
        let humans = || state.participants.values().filter(|p| !p.is_agent());
        let payout_total = state
            .payouts
            .values()
            .filter(|r| state.participants.get(&r.public_id).is_some_and(|p| !p.is_agent()))
            .fold(Money::ZERO, |acc, r| acc + r.total);
        let currency_unit = state.payouts.values().next().map(|r| r.currency_unit.clone()).unwrap_or_default();
        SimSummary {
            cohorts_total: state.cohorts.len(),
            cohorts_completed,
            participants: humans().filter(|p| p.joined).count(),
            messages: state
                .cohorts
                .values()
                .flat_map(|c| c.chats.values())
                .map(|ch| ch.messages.len())
                .sum(),
            payout_total,
            currency_unit,
            sim_seconds: self.clock.now().millis_since(SIM_EPOCH) / 1000,
            records: self.engine().records().len(),
            timed_out: self.timed_out(),
        }
    }

    pub fn archive(&self) -> Result<Vec<u8>, SimError> {
        let e = self.engine();
        Ok(export_archive(e.state(), e.records())?)
    }

    pub fn payout_csv(&self) -> Result<Vec<u8>, SimError> {
        Ok(export_payout_csv(self.engine().state())?)
    }

    /// The log exactly as persisted, one canonical record per line.
    pub fn event_log(&self) -> String {
        self.engine().log().to_jsonl()
    }
}

/// Runs a plan to completion.
pub fn simulate(loaded: &LoadedPlan, options: SimOptions) -> Result<Simulator, SimError> {
    let mut sim = Simulator::new(loaded, options)?;
    sim.run()?;
    Ok(sim)
}

#[cfg(test)]
mod tests;
