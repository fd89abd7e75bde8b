//! Built-in template configs.

use std::collections::BTreeMap;

use crate::agent::spec::AgentSpec;
use crate::ids::{ExperimentId, ExperimenterId, QuestionId};
use crate::model::answer::AnswerValue;
use crate::model::config::{AccessRole, ExperimentConfig, ExperimentSettings, Metadata};
use crate::model::stage::*;
use crate::money::Money;

pub const LOST_AT_SEA_ITEM_PAIRS: [(&str, &str, &str); 6] = [
    ("q1", "Shaving mirror", "Mosquito netting"),
    ("q2", "Five-gallon can of water", "Sea chart"),
    ("q3", "Case of army rations", "Small transistor radio"),
    ("q4", "Two boxes of chocolate bars", "Fishing kit"),
    ("q5", "Can of oil-gas mixture", "Fifteen feet of nylon rope"),
    ("q6", "Floating seat cushion", "Bottle of rum"),
];

/// Index into each pair of the better survival item (0 = first, 1 = second).
pub const LOST_AT_SEA_KEY: [usize; 6] = [0, 0, 0, 0, 0, 1];

fn stage(id: &str, title: &str, params: StageParams) -> StageConfig {
    StageConfig {
        id: id.into(),
        title: title.to_string(),
        markdown_body: String::new(),
        ui: StageUi::default(),
        params,
    }
}

fn waiting(mut s: StageConfig) -> StageConfig {
    s.ui.wait_for_all_participants = true;
    s
}

/// Leader-election study: pseudonymous profiles, a mediated group chat, a
/// peer election, a leader task, a reveal of the winner and a payout tied to
/// the leader's score.
pub fn lost_at_sea(creator: &str) -> ExperimentConfig {
    let questions = LOST_AT_SEA_ITEM_PAIRS
        .iter()
        .zip(LOST_AT_SEA_KEY)
        .map(|((id, a, b), key)| SurveyQuestion {
            id: QuestionId::from(*id),
            kind: QuestionKind::MultipleChoice,
            prompt: format!("Which item is more important for survival: {a} or {b}?"),
            options: vec![
                ChoiceOption { id: "a".into(), text: a.to_string() },
                ChoiceOption { id: "b".into(), text: b.to_string() },
            ],
            scale_bounds: None,
            correct_answer: Some(AnswerValue::Choice(if key == 0 { "a" } else { "b" }.into())),
        })
        .collect();

    let mut info = stage("instructions", "Instructions", StageParams::Info);
    info.markdown_body = "Your yacht has sunk. Discuss with your group which items matter most, \
        then elect a leader who will answer on the group's behalf."
        .to_string();

    ExperimentConfig {
        id: ExperimentId::from("lost-at-sea"),
        metadata: Metadata {
            name: "Lost at Sea".to_string(),
            description: "Leader election under pseudonymous or visible identities".to_string(),
            public_visibility: true,
            prolific_redirect_url: Some("https://app.prolific.com/submissions/complete?cc=C1LAS".to_string()),
            prolific_completion_code: Some("C1LAS".to_string()),
            template: true,
        },
        stages: vec![
            stage(
                "profile",
                "Your profile",
                StageParams::Profile(ProfileStageParams {
                    mode: ProfileMode::AssignedPseudonym,
                    pseudonym_set: Some(PseudonymSet::Animal),
                }),
            ),
            info,
            waiting(stage(
                "chat",
                "Group discussion",
                StageParams::GroupChat(ChatStageParams {
                    mediators: vec!["mediator".into()],
                    ..ChatStageParams::default()
                }),
            )),
            waiting(stage(
                "election",
                "Elect a leader",
                StageParams::RankingElection(ElectionStageParams {
                    mode: ElectionMode::Peers,
                    items: Vec::new(),
                    allow_self_vote: false,
                }),
            )),
            stage(
                "leader-task",
                "Leader task",
                StageParams::Survey(SurveyStageParams {
                    questions,
                    exclude_self: false,
                }),
            ),
            waiting(stage(
                "reveal",
                "Results",
                StageParams::Reveal(RevealStageParams {
                    sources: vec![RevealSource {
                        stage_id: "election".into(),
                        show: RevealView::ElectionWinner,
                    }],
                }),
            )),
            stage(
                "payout",
                "Payment",
                StageParams::Payout(PayoutStageParams {
                    currency_unit: "USD".to_string(),
                    base_pay: Money(500),
                    items: vec![PayoutItem::LeaderPerformance {
                        amount: Money(50),
                        election_stage_id: "election".into(),
                        survey_stage_id: "leader-task".into(),
                    }],
                }),
            ),
        ],
        agent_templates: vec![AgentSpec::simple_mediator(
            "mediator",
            "Facilitator",
            "ensure politeness",
            "scripted",
        )],
        roles: BTreeMap::from([(ExperimenterId::from(creator), AccessRole::Creator)]),
        settings: ExperimentSettings::default(),
    }
}
