//! Deterministic workloads shared by the benches and their smoke tests.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use huddle_core::agent::handraise::Candidate;
use huddle_core::engine::{EventRecord, ExperimentState};
use huddle_core::ids::PublicId;
use huddle_core::sim::{LoadedPlan, SimError, SimOptions, Simulator};
use huddle_core::tally::Ballot;

pub fn samples_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples")
}

/// `voters` full random rankings over `candidates` names.
pub fn ballot_profile(candidates: usize, voters: usize, seed: u64) -> (Vec<String>, Vec<Ballot>) {
    let names: Vec<String> = (0..candidates).map(|i| format!("p-{i:03}")).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ballots = (0..voters)
        .map(|v| {
            let mut ranking = names.clone();
            ranking.shuffle(&mut rng);
            Ballot {
                voter_public_id: PublicId::from(format!("v{v}")),
                ranking,
            }
        })
        .collect();
    (names, ballots)
}

/// Agents volunteering in one hand-raising round.
pub fn volunteers(n: usize, seed: u64) -> Vec<Candidate> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Candidate {
            wpm: rng.random_range(20.0..120.0),
            words: rng.random_range(5..80),
        })
        .collect()
}

/// The event log of the sample Lost-at-Sea run with `cohorts` cohorts.
pub fn simulated_log(cohorts: usize) -> Result<Vec<EventRecord>, SimError> {
    let mut loaded = LoadedPlan::load(&samples_dir().join("lost-at-sea-plan.json"))?;
    loaded.plan.cohort_count = cohorts;
    let mut sim = Simulator::new(&loaded, SimOptions::default())?;
    sim.run()?;
    let id = sim.experiment_id().clone();
    Ok(sim.hub().engine(&id).expect("simulated experiment").records().to_vec())
}

pub fn replay(records: &[EventRecord]) -> ExperimentState {
    ExperimentState::replay(records).expect("log replays")
}
