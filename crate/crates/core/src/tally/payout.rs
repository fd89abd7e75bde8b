use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{derive_seed, seeded_rng, CohortId, PublicId, StageId};
use crate::model::stage::{DrawScope, PayoutItem, PayoutStageParams, RandomOutcome};
use crate::money::Money;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PayoutRow {
    pub public_id: PublicId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_id: Option<String>,
    pub completion_status: String,
    pub base_pay: Money,
    pub bonus: Money,
    pub total: Money,
    pub currency_unit: String,
    /// Amount contributed by each configured item, in item order.
    pub item_amounts: Vec<Money>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PayoutError {
    #[error("payout references unresolved stage '{0}'")]
    UnresolvedReference(StageId),
}

/// What a payout reads about one participant and their cohort.
pub trait PayoutData {
    fn public_id(&self) -> &PublicId;
    fn cohort_id(&self) -> &CohortId;
    fn completed_stage(&self, stage: &StageId) -> bool;
    /// Correct answers the given member gave in a scored survey; `None` while
    /// the survey is unanswered.
    fn correct_answers(&self, member: &str, survey: &StageId) -> Option<u32>;
    /// `None` while the election is unresolved.
    fn election_winner(&self, election: &StageId) -> Option<String>;
    /// Whether the member can still answer (not booted or otherwise gone).
    fn member_can_answer(&self, member: &str) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoutMode {
    /// Every reference must resolve.
    Final,
    /// Unresolved items count as zero; random conditions and base pay are
    /// not earned.
    EarnedSoFar,
}

pub fn draw_outcome(outcomes: &[RandomOutcome], seed: u64) -> Money {
    let mut rng = seeded_rng(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for o in outcomes {
        acc += o.probability;
        if u < acc {
            return o.amount;
        }
    }
    outcomes.last().map(|o| o.amount).unwrap_or(Money::ZERO)
}

pub fn draw_seed(experiment_seed: u64, stage: &StageId, item: usize, scope: DrawScope, data: &dyn PayoutData) -> u64 {
    let item = item.to_string();
    match scope {
        DrawScope::Cohort => derive_seed(
            experiment_seed,
            &["payout", data.cohort_id().as_str(), stage.as_str(), &item],
        ),
        DrawScope::Participant => derive_seed(
            experiment_seed,
            &["payout", data.cohort_id().as_str(), stage.as_str(), &item, data.public_id().as_str()],
        ),
    }
}

/// Sums the configured items for one participant. `completion_status` and
/// `external_id` are filled in by the caller.
pub fn compute_payout(
    stage: &StageId,
    params: &PayoutStageParams,
    data: &dyn PayoutData,
    experiment_seed: u64,
    mode: PayoutMode,
) -> Result<PayoutRow, PayoutError> {
    let mut item_amounts = Vec::with_capacity(params.items.len());
    for (i, item) in params.items.iter().enumerate() {
        let amount = match item {
            PayoutItem::FixedCompletion { amount, stage_ids } => {
                if stage_ids.iter().all(|s| data.completed_stage(s)) {
                    *amount
                } else {
                    Money::ZERO
                }
            }
            PayoutItem::QuizPerformance { amount, survey_stage_id } => {
                match data.correct_answers(data.public_id().as_str(), survey_stage_id) {
                    Some(n) => amount.times(i64::from(n)),
                    None if mode == PayoutMode::Final => {
                        return Err(PayoutError::UnresolvedReference(survey_stage_id.clone()))
                    }
                    None => Money::ZERO,
                }
            }
            PayoutItem::RandomCondition { outcomes, scope } => match mode {
                PayoutMode::Final => draw_outcome(outcomes, draw_seed(experiment_seed, stage, i, *scope, data)),
                PayoutMode::EarnedSoFar => Money::ZERO,
            },
            PayoutItem::LeaderPerformance {
                amount,
                election_stage_id,
                survey_stage_id,
            } => {
                let resolved = data.election_winner(election_stage_id).and_then(|leader| {
                    match data.correct_answers(&leader, survey_stage_id) {
                        Some(n) => Some(n),
                        // A leader who can no longer answer scores zero.
                        None if !data.member_can_answer(&leader) => Some(0),
                        None => None,
                    }
                });
                match resolved {
                    Some(n) => amount.times(i64::from(n)),
                    None if mode == PayoutMode::Final => {
                        let missing = if data.election_winner(election_stage_id).is_none() {
                            election_stage_id
                        } else {
                            survey_stage_id
                        };
                        return Err(PayoutError::UnresolvedReference(missing.clone()));
                    }
                    None => Money::ZERO,
                }
            }
        };
        item_amounts.push(amount);
    }
    let bonus: Money = item_amounts.iter().copied().sum();
    let base_pay = match mode {
        PayoutMode::Final => params.base_pay,
        PayoutMode::EarnedSoFar => Money::ZERO,
    };
    Ok(PayoutRow {
        public_id: data.public_id().clone(),
        external_id: None,
        completion_status: String::new(),
        base_pay,
        bonus,
        total: base_pay + bonus,
        currency_unit: params.currency_unit.clone(),
        item_amounts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct Data {
        me: PublicId,
        cohort: CohortId,
        correct: HashMap<String, u32>,
        winner: Option<String>,
        gone: Vec<String>,
    }

    impl PayoutData for Data {
        fn public_id(&self) -> &PublicId {
            &self.me
        }
        fn cohort_id(&self) -> &CohortId {
            &self.cohort
        }
        fn completed_stage(&self, _: &StageId) -> bool {
            true
        }
        fn correct_answers(&self, member: &str, _: &StageId) -> Option<u32> {
            self.correct.get(member).copied()
        }
        fn election_winner(&self, _: &StageId) -> Option<String> {
            self.winner.clone()
        }
        fn member_can_answer(&self, member: &str) -> bool {
            !self.gone.iter().any(|g| g == member)
        }
    }

    fn data(me: &str) -> Data {
        Data {
            me: me.into(),
            cohort: "c1".into(),
            correct: HashMap::from([("p1".into(), 3), ("leader".into(), 4)]),
            winner: Some("leader".into()),
            gone: vec![],
        }
    }

    fn params(items: Vec<PayoutItem>) -> PayoutStageParams {
        PayoutStageParams {
            currency_unit: "USD".into(),
            base_pay: Money(500),
            items,
        }
    }

    #[test]
    fn base_plus_quiz() {
        let p = params(vec![PayoutItem::QuizPerformance {
            amount: Money(100),
            survey_stage_id: "quiz".into(),
        }]);
        let row = compute_payout(&"pay".into(), &p, &data("p1"), 0, PayoutMode::Final).unwrap();
        assert_eq!(row.total, Money(800));
        assert_eq!(row.total.to_string(), "8.00");
        assert_eq!(row.bonus, Money(300));
    }

    #[test]
    fn leader_performance_pays_every_member() {
        let p = params(vec![PayoutItem::LeaderPerformance {
            amount: Money(50),
            election_stage_id: "e".into(),
            survey_stage_id: "task".into(),
        }]);
        for me in ["p1", "p2", "leader"] {
            let row = compute_payout(&"pay".into(), &p, &data(me), 0, PayoutMode::Final).unwrap();
            assert_eq!(row.bonus, Money(200));
        }
    }

    #[test]
    fn unresolved_reference_in_final_mode() {
        let p = params(vec![PayoutItem::LeaderPerformance {
            amount: Money(50),
            election_stage_id: "e".into(),
            survey_stage_id: "task".into(),
        }]);
        let mut d = data("p1");
        d.winner = None;
        assert_eq!(
            compute_payout(&"pay".into(), &p, &d, 0, PayoutMode::Final).unwrap_err(),
            PayoutError::UnresolvedReference("e".into())
        );
        let row = compute_payout(&"pay".into(), &p, &d, 0, PayoutMode::EarnedSoFar).unwrap();
        assert_eq!(row.total, Money::ZERO);
    }

    #[test]
    fn booted_leader_scores_zero() {
        let p = params(vec![PayoutItem::LeaderPerformance {
            amount: Money(50),
            election_stage_id: "e".into(),
            survey_stage_id: "task".into(),
        }]);
        let mut d = data("p1");
        d.correct.remove("leader");
        d.gone.push("leader".into());
        let row = compute_payout(&"pay".into(), &p, &d, 0, PayoutMode::Final).unwrap();
        assert_eq!(row.bonus, Money::ZERO);
    }

    #[test]
    fn cohort_scope_draw_is_shared() {
        let p = params(vec![PayoutItem::RandomCondition {
            outcomes: vec![
                RandomOutcome { amount: Money(200), probability: 0.5 },
                RandomOutcome { amount: Money(0), probability: 0.5 },
            ],
            scope: DrawScope::Cohort,
        }]);
        for seed in 0..50 {
            let a = compute_payout(&"pay".into(), &p, &data("p1"), seed, PayoutMode::Final).unwrap();
            let b = compute_payout(&"pay".into(), &p, &data("p2"), seed, PayoutMode::Final).unwrap();
            assert_eq!(a.bonus, b.bonus);
        }
    }
}
