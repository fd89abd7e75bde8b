use huddle_bench::{ballot_profile, replay, simulated_log, volunteers};
use huddle_core::tally::compute_election_winner;

#[test]
fn profiles_are_seeded() {
    let (names, a) = ballot_profile(5, 10, 3);
    let (_, b) = ballot_profile(5, 10, 3);
    assert_eq!(a, b);
    assert!(a.iter().all(|ballot| ballot.ranking.len() == names.len()));
    compute_election_winner(&a, &names).unwrap();
}

#[test]
fn volunteers_are_valid_candidates() {
    let v = volunteers(8, 1);
    assert_eq!(v.len(), 8);
    assert!(v.iter().all(|c| c.wpm > 0.0 && c.words > 0));
}

#[test]
fn simulated_log_replays() {
    let records = simulated_log(2).unwrap();
    assert!(!records.is_empty());
    let state = replay(&records);
    assert_eq!(state.cohorts.len(), 2);
}
