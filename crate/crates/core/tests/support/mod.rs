#![allow(dead_code)]

pub mod election;
pub mod structured;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use huddle_core::agent::handraise::{complete_agent_stage, run_hand_raising_round};
use huddle_core::engine::{Actor, Engine, Job};
use huddle_core::ids::{CohortId, IdGen, PublicId};
use huddle_core::llm::{Gateway, KeyStore, MasterKey, Script, ScriptedProvider};
use huddle_core::model::config::ExperimentConfig;
use huddle_core::model::{AnswerContent, AnswerValue, StageParams};
use huddle_core::time::{ManualClock, Timestamp};

pub const CREATOR: &str = "owner@lab";

pub fn samples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples")
}

pub fn t(s: i64) -> Timestamp {
    Timestamp::from_secs(s)
}

pub fn exp() -> Actor {
    Actor::Experimenter { id: CREATOR.into() }
}

pub fn me(id: &PublicId) -> Actor {
    Actor::Participant { public_id: id.clone() }
}

pub fn engine(config: ExperimentConfig, seed: u64) -> Engine {
    Engine::create(config, seed, IdGen::seeded(seed), None, t(0)).unwrap()
}

pub fn gateway(clock: &ManualClock, script: Script) -> Gateway {
    let mut gw = Gateway::new(
        KeyStore::in_memory(MasterKey::random()),
        Arc::new(clock.clone()),
        Arc::new(clock.clone()),
    );
    gw.register_provider("scripted", "scripted://", Arc::new(ScriptedProvider::new(script).unwrap()));
    gw
}

/// Runs outstanding provider jobs at `now` until none remain.
pub fn pump(e: &mut Engine, gw: &Gateway, clock: &ManualClock, now: Timestamp) {
    for _ in 0..100 {
        let jobs = e.take_jobs();
        if jobs.is_empty() {
            return;
        }
        clock.set(now);
        for job in jobs {
            match job {
                Job::Round(r) => {
                    let out = run_hand_raising_round(&r.request, gw, clock);
                    let _ = e.finish_round(&r, out, now);
                }
                Job::Stage(s) => {
                    let (res, logs) = complete_agent_stage(&s.task, gw, clock);
                    let _ = e.finish_stage_task(&s, res, logs, now);
                }
            }
        }
    }
    panic!("jobs did not drain");
}

/// Adds `n` participants to `cohort` without joining them.
pub fn add(e: &mut Engine, cohort: &CohortId, n: usize, now: Timestamp) -> Vec<(PublicId, String)> {
    (0..n)
        .map(|_| {
            let np = e.add_participant(exp(), cohort, None, None, now).unwrap();
            (np.public_id, np.private_id.expose().to_string())
        })
        .collect()
}

/// A valid answer for a participant's current stage, if the stage takes one.
pub fn answer_for(e: &Engine, id: &PublicId, candidates: &[String]) -> Option<AnswerContent> {
    let state = e.state();
    let p = &state.participants[id];
    let stage = state.stage_at(p.current_stage_index)?;
    match &stage.params {
        StageParams::RankingElection(_) => Some(AnswerContent::Ranking {
            ranking: candidates.to_vec(),
        }),
        StageParams::Survey(s) => Some(AnswerContent::Survey {
            answers: s
                .questions
                .iter()
                .filter_map(|q| q.options.first().map(|o| (q.id.clone(), AnswerValue::Choice(o.id.clone()))))
                .collect(),
        }),
        _ => None,
    }
}
