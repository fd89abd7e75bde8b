mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::sample::subsequence;

use huddle_core::agent::spec::mandatory_fields;
use huddle_core::agent::structured::parse_structured_output;
use huddle_core::engine::ExperimentState;
use huddle_core::ids::{PrivateId, PublicId, StageId};
use huddle_core::llm::Script;
use huddle_core::model::stage::RandomOutcome;
use huddle_core::model::templates::lost_at_sea;
use huddle_core::money::Money;
use huddle_core::service::participant_view;
use huddle_core::tally::payout::draw_outcome;
use huddle_core::tally::{compute_election_winner, Ballot, Tally};
use huddle_core::time::ManualClock;

use support::{answer_for, exp, me, t, CREATOR};

const NAMES: [&str; 4] = ["d", "a", "c", "b"];

/// Candidates plus ballots that may leave some of them out.
fn profile() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>)> {
    (2usize..=4).prop_flat_map(|n| {
        let cands: Vec<String> = NAMES[..n].iter().map(|s| s.to_string()).collect();
        let ballot = Just(cands.clone())
            .prop_shuffle()
            .prop_flat_map(move |r| {
                let len = r.len();
                subsequence(r, 1..=len)
            });
        (Just(cands), prop::collection::vec(ballot, 1..=4))
    })
}

fn ballots(rankings: &[Vec<String>]) -> Vec<Ballot> {
    rankings
        .iter()
        .enumerate()
        .map(|(i, r)| Ballot {
            voter_public_id: PublicId::from(format!("v{i}")),
            ranking: r.clone(),
        })
        .collect()
}

proptest! {
    #[test]
    fn election_matches_oracle((cands, profile) in profile()) {
        let got = compute_election_winner(&ballots(&profile), &cands).unwrap();
        let want = support::election::winner(&profile, &cands);
        prop_assert_eq!(got.winner, want.winner);
        prop_assert_eq!(got.tie_break_applied, want.tie_break);
    }

    #[test]
    fn election_ignores_ballot_and_candidate_order(
        (cands, profile) in profile(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let base = compute_election_winner(&ballots(&profile), &cands).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut p2 = profile.clone();
        p2.shuffle(&mut rng);
        let mut c2 = cands.clone();
        c2.shuffle(&mut rng);
        let other = compute_election_winner(&ballots(&p2), &c2).unwrap();
        prop_assert_eq!(base.winner, other.winner);
    }

    #[test]
    fn incremental_tally_equals_batch((cands, profile) in profile()) {
        let mut tally = Tally::new(cands.iter().cloned());
        for b in ballots(&profile) {
            tally.add(&b).unwrap();
        }
        prop_assert_eq!(tally.ballots() as usize, profile.len());
        prop_assert_eq!(tally.result().unwrap(), compute_election_winner(&ballots(&profile), &cands).unwrap());
    }

    #[test]
    fn random_payout_draw_is_one_of_the_outcomes(
        amounts in prop::collection::vec(0i64..10_000, 1..5),
        seed in any::<u64>(),
    ) {
        let p = 1.0 / amounts.len() as f64;
        let outcomes: Vec<RandomOutcome> = amounts
            .iter()
            .map(|&a| RandomOutcome { amount: Money::from_minor(a), probability: p })
            .collect();
        let drawn = draw_outcome(&outcomes, seed);
        prop_assert!(amounts.contains(&drawn.minor()));
        prop_assert_eq!(drawn, draw_outcome(&outcomes, seed));
    }

    #[test]
    fn parser_never_panics(raw in any::<String>()) {
        let _ = parse_structured_output(&raw, &mandatory_fields());
    }

    #[test]
    fn parser_never_panics_on_near_json(raw in r#"[ {}\[\]":,a-z0-9\\.\-tfrun]{0,80}"#) {
        let _ = parse_structured_output(&raw, &mandatory_fields());
    }
}

#[derive(Debug, Clone)]
enum Op {
    Join(usize),
    Step(usize),
    Chat(usize),
    EndVote(usize),
    Boot(usize),
    Tick,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (0usize..4).prop_map(Op::Join),
        6 => (0usize..4).prop_map(Op::Step),
        2 => (0usize..4).prop_map(Op::Chat),
        2 => (0usize..4).prop_map(Op::EndVote),
        1 => (0usize..4).prop_map(Op::Boot),
        2 => Just(Op::Tick),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Replaying the log reproduces the live state after every command, and a
    /// reveal never changes once it has been taken.
    #[test]
    fn replay_equals_live_and_reveals_are_frozen(seed in 0u64..1_000, ops in prop::collection::vec(op(), 1..120)) {
        let clock = ManualClock::new(t(0));
        let gw = support::gateway(&clock, Script::default());
        let mut e = support::engine(lost_at_sea(CREATOR), seed);
        let c = e.create_cohort(exp(), "A", t(1)).unwrap();
        let people = support::add(&mut e, &c, 4, t(1));
        let mut now = t(1);
        let mut frozen: BTreeMap<StageId, _> = BTreeMap::new();
        for op in ops {
            now = now.plus_secs(7);
            let _ = match op {
                Op::Join(i) => e.join(&PrivateId::new(people[i].1.clone()).digest(), now).map(|_| ()),
                Op::Step(i) => {
                    let id = &people[i].0;
                    let candidates = participant_view(e.state(), id).map(|v| v.candidates).unwrap_or_default();
                    let answer = answer_for(&e, id, &candidates);
                    e.advance(me(id), id, answer, now)
                }
                Op::Chat(i) => e.send_chat(me(&people[i].0), &people[i].0, "keep the water", now).map(|_| ()),
                Op::EndVote(i) => e.vote_end_chat(me(&people[i].0), &people[i].0, now),
                Op::Boot(i) => e.boot(exp(), &people[i].0, now),
                Op::Tick => e.tick(now),
            };
            support::pump(&mut e, &gw, &clock, now);

            for (stage, snap) in &e.state().cohorts[&c].reveals {
                if let Some(prev) = frozen.get(stage) {
                    prop_assert_eq!(prev, snap);
                } else {
                    frozen.insert(stage.clone(), snap.clone());
                }
            }
            let live = e.state();
            prop_assert_eq!(&ExperimentState::replay(e.records()).unwrap(), live);
            for (id, _) in &people {
                let _ = participant_view(live, id);
            }
        }
    }
}
