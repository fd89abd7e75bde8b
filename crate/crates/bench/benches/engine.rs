use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use huddle_bench::{ballot_profile, replay, simulated_log, volunteers};
use huddle_core::agent::handraise::select_winner;
use huddle_core::model::stage::SelectionMode;
use huddle_core::tally::{compute_election_winner, Tally};

fn tally(c: &mut Criterion) {
    let mut g = c.benchmark_group("election");
    for (cands, voters) in [(4, 4), (8, 50), (20, 200)] {
        let (names, ballots) = ballot_profile(cands, voters, 1);
        g.bench_with_input(BenchmarkId::new("batch", format!("{cands}x{voters}")), &ballots, |b, ballots| {
            b.iter(|| compute_election_winner(black_box(ballots), &names).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("incremental", format!("{cands}x{voters}")), &ballots, |b, ballots| {
            b.iter(|| {
                let mut t = Tally::new(names.iter().cloned());
                for ballot in ballots {
                    t.add(ballot).unwrap();
                }
                t.result().unwrap()
            })
        });
    }
    g.finish();
}

fn selection(c: &mut Criterion) {
    let pool = volunteers(8, 2);
    let mut g = c.benchmark_group("selection");
    for mode in [SelectionMode::WeightedByWpm, SelectionMode::FastestWins] {
        g.bench_function(format!("{mode:?}"), |b| {
            let mut seed = 0u64;
            b.iter(|| {
                seed += 1;
                select_winner(black_box(&pool), mode, seed)
            })
        });
    }
    g.finish();
}

fn replay_log(c: &mut Criterion) {
    let records = simulated_log(5).expect("sample plan runs");
    let mut g = c.benchmark_group("replay");
    g.sample_size(20);
    g.bench_function(format!("{} records", records.len()), |b| b.iter(|| replay(black_box(&records))));
    g.finish();
}

criterion_group!(benches, tally, selection, replay_log);
criterion_main!(benches);
