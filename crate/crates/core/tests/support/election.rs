//! Brute-force pairwise-majority oracle. Shares no code with the tally: it
//! compares ballot positions pair by pair instead of accumulating a matrix.

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub winner: String,
    pub tie_break: bool,
}

fn prefers(ballot: &[String], a: &str, b: &str) -> bool {
    let pa = ballot.iter().position(|c| c == a);
    let pb = ballot.iter().position(|c| c == b);
    matches!((pa, pb), (Some(x), Some(y)) if x < y)
}

fn margin(ballots: &[Vec<String>], a: &str, b: &str) -> Ordering {
    let for_a = ballots.iter().filter(|r| prefers(r, a, b)).count();
    let for_b = ballots.iter().filter(|r| prefers(r, b, a)).count();
    for_a.cmp(&for_b)
}

pub fn winner(ballots: &[Vec<String>], candidates: &[String]) -> OracleResult {
    let mut sorted = candidates.to_vec();
    sorted.sort();
    for c in &sorted {
        if sorted.iter().filter(|o| *o != c).all(|o| margin(ballots, c, o) == Ordering::Greater) {
            return OracleResult {
                winner: c.clone(),
                tie_break: false,
            };
        }
    }
    let score = |c: &String| -> i64 {
        sorted
            .iter()
            .filter(|o| *o != c)
            .map(|o| match margin(ballots, c, o) {
                Ordering::Greater => 1,
                Ordering::Less => -1,
                Ordering::Equal => 0,
            })
            .sum()
    };
    let best = sorted.iter().map(score).max().expect("candidates");
    let top: Vec<&String> = sorted.iter().filter(|c| score(c) == best).collect();
    OracleResult {
        winner: top[0].clone(),
        tie_break: top.len() > 1,
    }
}

/// Every ordering of `items`.
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}
