//! Lobby matching.

use std::collections::{BTreeMap, VecDeque};

use crate::ids::PublicId;
use crate::model::stage::{TransferStageParams, TransferStrategy};
use crate::time::Timestamp;

/// A participant waiting at a transfer stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Waiting {
    pub public_id: PublicId,
    pub arrived_at: Timestamp,
    /// Bucketing key for composition matching (the answer key to the
    /// configured question), if answered.
    pub attribute: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// New cohorts, members in arrival order.
    pub groups: Vec<Vec<PublicId>>,
    pub timed_out: Vec<PublicId>,
}

/// Greedy, arrival-ordered matching. Deterministic in the arrival sequence:
/// ties on arrival time fall back to publicId.
pub fn match_lobby(waiting: &[Waiting], params: &TransferStageParams, now: Timestamp) -> MatchResult {
    let mut order: Vec<&Waiting> = waiting.iter().collect();
    order.sort_by(|a, b| a.arrived_at.cmp(&b.arrived_at).then_with(|| a.public_id.cmp(&b.public_id)));
    let size = params.target_cohort_size as usize;
    let mut groups = Vec::new();
    let mut left: Vec<&Waiting> = Vec::new();

    match (params.strategy, params.composition.first()) {
        (TransferStrategy::ByAttributeComposition, Some(rule)) => {
            let mut buckets: BTreeMap<&str, VecDeque<&Waiting>> =
                rule.required_counts.keys().map(|k| (k.as_str(), VecDeque::new())).collect();
            for w in &order {
                match w.attribute.as_deref().and_then(|a| buckets.get_mut(a)) {
                    Some(b) => b.push_back(w),
                    None => left.push(w),
                }
            }
            let feasible = |buckets: &BTreeMap<&str, VecDeque<&Waiting>>| {
                rule.required_counts
                    .iter()
                    .all(|(k, n)| buckets[k.as_str()].len() >= *n as usize)
            };
            while !rule.required_counts.is_empty() && feasible(&buckets) {
                let mut g: Vec<&Waiting> = Vec::new();
                for (k, n) in &rule.required_counts {
                    let b = buckets.get_mut(k.as_str()).expect("bucket per key");
                    g.extend(b.drain(..*n as usize));
                }
                g.sort_by(|a, b| a.arrived_at.cmp(&b.arrived_at).then_with(|| a.public_id.cmp(&b.public_id)));
                groups.push(g.into_iter().map(|w| w.public_id.clone()).collect());
            }
            left.extend(buckets.into_values().flatten());
        }
        _ => {
            let mut chunks = order.chunks_exact(size.max(1));
            for c in chunks.by_ref() {
                groups.push(c.iter().map(|w| w.public_id.clone()).collect());
            }
            left.extend(chunks.remainder());
        }
    }

    let timeout_ms = i64::from(params.timeout_seconds) * 1000;
    left.sort_by(|a, b| a.arrived_at.cmp(&b.arrived_at).then_with(|| a.public_id.cmp(&b.public_id)));
    let timed_out = left
        .into_iter()
        .filter(|w| now.millis_since(w.arrived_at) >= timeout_ms)
        .map(|w| w.public_id.clone())
        .collect();
    MatchResult { groups, timed_out }
}
