//! Condorcet election with Copeland fallback and a lexicographic final
//! tie-break.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::ids::PublicId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Ballot {
    pub voter_public_id: PublicId,
    /// Best first.
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ElectionMethod {
    CondorcetCopeland,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ElectionResult {
    pub winner: String,
    pub method: ElectionMethod,
    /// Candidates in lexicographic order; row/column order of the matrix.
    pub candidates: Vec<String>,
    /// `pairwise_matrix[i][j]` = ballots ranking candidate i above candidate j.
    pub pairwise_matrix: Vec<Vec<u32>>,
    pub copeland_scores: BTreeMap<String, i32>,
    pub tie_break_applied: bool,
    pub ballots_counted: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TallyError {
    #[error("no ballots were cast")]
    NoBallots,
    #[error("no candidates")]
    NoCandidates,
    #[error("ballot from {voter} is invalid: {reason}")]
    InvalidBallot { voter: PublicId, reason: String },
}

/// Running pairwise tally. Adding ballots in any order yields the same result.
#[derive(Debug, Clone)]
pub struct Tally {
    candidates: Vec<String>,
    index: BTreeMap<String, usize>,
    matrix: Vec<Vec<u32>>,
    ballots: u32,
}

impl Tally {
    pub fn new<I, S>(candidates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut candidates: Vec<String> = candidates.into_iter().map(Into::into).collect();
        candidates.sort();
        candidates.dedup();
        let index = candidates.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let n = candidates.len();
        Tally {
            candidates,
            index,
            matrix: vec![vec![0; n]; n],
            ballots: 0,
        }
    }

    /// Rankings may omit candidates (a voter excluded from ranking
    /// themselves); omitted pairs are not counted.
    pub fn add(&mut self, ballot: &Ballot) -> Result<(), TallyError> {
        let mut seen = HashSet::new();
        let mut positions = Vec::with_capacity(ballot.ranking.len());
        for c in &ballot.ranking {
            let Some(&i) = self.index.get(c) else {
                return Err(TallyError::InvalidBallot {
                    voter: ballot.voter_public_id.clone(),
                    reason: format!("unknown candidate '{c}'"),
                });
            };
            if !seen.insert(i) {
                return Err(TallyError::InvalidBallot {
                    voter: ballot.voter_public_id.clone(),
                    reason: format!("candidate '{c}' ranked twice"),
                });
            }
            positions.push(i);
        }
        for (a, &hi) in positions.iter().enumerate() {
            for &lo in &positions[a + 1..] {
                self.matrix[hi][lo] += 1;
            }
        }
        self.ballots += 1;
        Ok(())
    }

    pub fn ballots(&self) -> u32 {
        self.ballots
    }

    pub fn result(&self) -> Result<ElectionResult, TallyError> {
        if self.candidates.is_empty() {
            return Err(TallyError::NoCandidates);
        }
        if self.ballots == 0 {
            return Err(TallyError::NoBallots);
        }
        let n = self.candidates.len();
        let mut wins = vec![0i32; n];
        let mut losses = vec![0i32; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    match self.matrix[i][j].cmp(&self.matrix[j][i]) {
                        std::cmp::Ordering::Greater => wins[i] += 1,
                        std::cmp::Ordering::Less => losses[i] += 1,
                        std::cmp::Ordering::Equal => {}
                    }
                }
            }
        }
        let scores: Vec<i32> = (0..n).map(|i| wins[i] - losses[i]).collect();

        let condorcet = (0..n).find(|&i| wins[i] == (n as i32 - 1));
        let (winner, tie_break_applied) = match condorcet {
            Some(i) => (i, false),
            None => {
                let best = *scores.iter().max().expect("non-empty");
                // Candidates are sorted, so the first maximum is the
                // lexicographically smallest.
                let top: Vec<usize> = (0..n).filter(|&i| scores[i] == best).collect();
                (top[0], top.len() > 1)
            }
        };

        Ok(ElectionResult {
            winner: self.candidates[winner].clone(),
            method: ElectionMethod::CondorcetCopeland,
            candidates: self.candidates.clone(),
            pairwise_matrix: self.matrix.clone(),
            copeland_scores: self
                .candidates
                .iter()
                .cloned()
                .zip(scores)
                .collect(),
            tie_break_applied,
            ballots_counted: self.ballots,
        })
    }
}

pub fn compute_election_winner<S: AsRef<str>>(
    ballots: &[Ballot],
    candidates: &[S],
) -> Result<ElectionResult, TallyError> {
    let mut tally = Tally::new(candidates.iter().map(|c| c.as_ref().to_string()));
    for b in ballots {
        tally.add(b)?;
    }
    tally.result()
}

/// Group item ranking by mean position (1-based), best first. Ties go to the
/// lexicographically smaller item.
pub fn mean_rank<S: AsRef<str>>(ballots: &[Ballot], items: &[S]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = items
        .iter()
        .map(|item| {
            let item = item.as_ref();
            let positions: Vec<f64> = ballots
                .iter()
                .filter_map(|b| b.ranking.iter().position(|r| r == item))
                .map(|p| (p + 1) as f64)
                .collect();
            let mean = if positions.is_empty() {
                f64::INFINITY
            } else {
                positions.iter().sum::<f64>() / positions.len() as f64
            };
            (item.to_string(), mean)
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ballot(voter: &str, ranking: &[&str]) -> Ballot {
        Ballot {
            voter_public_id: voter.into(),
            ranking: ranking.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn unanimous_first_choice_wins() {
        let ballots = vec![
            ballot("v1", &["C", "A", "B"]),
            ballot("v2", &["C", "B", "A"]),
            ballot("v3", &["C", "A", "B"]),
        ];
        let r = compute_election_winner(&ballots, &["A", "B", "C"]).unwrap();
        assert_eq!(r.winner, "C");
        assert!(!r.tie_break_applied);
    }

    #[test]
    fn cycle_falls_back_to_lexicographic_tie_break() {
        let ballots = vec![
            ballot("v1", &["A", "B", "C"]),
            ballot("v2", &["B", "C", "A"]),
            ballot("v3", &["C", "A", "B"]),
        ];
        let r = compute_election_winner(&ballots, &["C", "B", "A"]).unwrap();
        assert_eq!(r.winner, "A");
        assert!(r.tie_break_applied);
        assert!(r.copeland_scores.values().all(|&s| s == 0));
    }

    #[test]
    fn copeland_breaks_cycle_without_tie() {
        // A beats B and C; B and C tie; D loses to everyone except C.
        let ballots = vec![
            ballot("v1", &["A", "B", "D", "C"]),
            ballot("v2", &["A", "C", "D", "B"]),
            ballot("v3", &["B", "A", "C", "D"]),
        ];
        let r = compute_election_winner(&ballots, &["A", "B", "C", "D"]).unwrap();
        assert_eq!(r.winner, "A");
        assert!(!r.tie_break_applied);
    }

    #[test]
    fn errors() {
        let none: Vec<Ballot> = vec![];
        assert_eq!(compute_election_winner(&none, &["A"]).unwrap_err(), TallyError::NoBallots);
        let bad = vec![ballot("v", &["A", "A"])];
        assert!(matches!(
            compute_election_winner(&bad, &["A", "B"]),
            Err(TallyError::InvalidBallot { .. })
        ));
    }

    #[test]
    fn partial_rankings_skip_missing_pairs() {
        // Voters never rank themselves.
        let ballots = vec![
            ballot("A", &["B", "C"]),
            ballot("B", &["A", "C"]),
            ballot("C", &["A", "B"]),
        ];
        let r = compute_election_winner(&ballots, &["A", "B", "C"]).unwrap();
        assert_eq!(r.winner, "A");
        assert!(!r.tie_break_applied);
        // Only voter C compares A with B.
        assert_eq!(r.pairwise_matrix[0][1], 1);
        assert_eq!(r.pairwise_matrix[1][0], 0);
    }

    #[test]
    fn mean_rank_orders_items() {
        let ballots = vec![ballot("v1", &["x", "y", "z"]), ballot("v2", &["y", "x", "z"])];
        let agg = mean_rank(&ballots, &["z", "y", "x"]);
        assert_eq!(agg[0], ("x".to_string(), 1.5));
        assert_eq!(agg[1], ("y".to_string(), 1.5));
        assert_eq!(agg[2], ("z".to_string(), 3.0));
    }
}
