use super::*;
use crate::llm::scripted::Script;
use crate::model::answer::AnswerValue;
use crate::model::templates::{lost_at_sea, LOST_AT_SEA_KEY};

fn leader_answers() -> AnswerContent {
    AnswerContent::Survey {
        answers: LOST_AT_SEA_KEY
            .iter()
            .enumerate()
            .map(|(i, k)| (format!("q{}", i + 1).into(), AnswerValue::Choice(if *k == 0 { "a" } else { "b" }.into())))
            .collect(),
    }
}

fn script(i: usize) -> ParticipantScript {
    let mut stages = BTreeMap::new();
    stages.insert(
        StageId::from("chat"),
        StageScript {
            messages: vec![format!("I think the mirror matters most ({i})")],
            ..StageScript::default()
        },
    );
    stages.insert(
        StageId::from("election"),
        StageScript {
            ranking: Some(if i.is_multiple_of(2) { RankingRule::AsListed } else { RankingRule::Reversed }),
            ..StageScript::default()
        },
    );
    stages.insert(
        StageId::from("leader-task"),
        StageScript {
            answer: Some(leader_answers()),
            ..StageScript::default()
        },
    );
    ParticipantScript {
        profile: None,
        stages,
        timing_jitter: Jitter::default(),
        acknowledge_attention_checks: i != 3,
        accept_transfers: true,
    }
}

fn mediator_script() -> Script {
    serde_json::from_value(serde_json::json!({
        "entries": [
            {"match": {"contains": "Facilitator: Welcome"}, "response": {"shouldRespond": false, "response": "", "readyToEndChat": true}},
            {"match": "any", "response": {"shouldRespond": true, "response": "Welcome, be kind.", "readyToEndChat": true}}
        ]
    }))
    .unwrap()
}

fn loaded(cohorts: usize, seed: u64, stop: StopCondition) -> LoadedPlan {
    LoadedPlan {
        plan: SimulationPlan {
            experiment_config: "lost-at-sea.json".into(),
            participant_scripts: (0..4).map(script).collect(),
            agent_provider_script: None,
            seed,
            cohort_count: cohorts,
            participants_per_cohort: None,
            stop_condition: stop,
            attention_checks: vec![AttentionCheckPlan {
                at_seconds: 20,
                deadline_seconds: 60,
            }],
        },
        config: lost_at_sea("someone@lab"),
        provider_script: mediator_script(),
    }
}

#[test]
fn lost_at_sea_cohorts_finish() {
    let sim = simulate(&loaded(3, 11, StopCondition::AllTerminal), SimOptions::default()).unwrap();
    let s = sim.summary();
    assert!(!s.timed_out, "{s}");
    assert_eq!(s.cohorts_completed, 3);
    assert_eq!(s.participants, 12);
    // 4 human messages per cohort plus mediator welcomes that were
    // delivered before the chat ended.
    assert!((13..=15).contains(&s.messages), "{s}");
    let csv = String::from_utf8(sim.payout_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("externalId,completionStatus,bonus\r\n"));
    let stats = crate::store::export::export_stats(sim.hub().engine(sim.experiment_id()).unwrap().state());
    assert_eq!(stats.attention.sent, 12);
    assert_eq!(stats.attention.passed, 9);
}

#[test]
fn same_seed_gives_identical_logs_and_archives() {
    let a = simulate(&loaded(2, 5, StopCondition::AllTerminal), SimOptions::default()).unwrap();
    let b = simulate(&loaded(2, 5, StopCondition::AllTerminal), SimOptions::default()).unwrap();
    assert_eq!(a.event_log(), b.event_log());
    assert_eq!(a.archive().unwrap(), b.archive().unwrap());
    let c = simulate(&loaded(2, 6, StopCondition::AllTerminal), SimOptions::default()).unwrap();
    assert_ne!(a.event_log(), c.event_log());
}

#[test]
fn max_sim_seconds_stops_early() {
    let mut sim = Simulator::new(&loaded(2, 5, StopCondition::MaxSimSeconds(10)), SimOptions::default()).unwrap();
    assert_eq!(sim.run().unwrap(), StepStatus::TimedOut);
    let s = sim.summary();
    assert!(s.timed_out);
    assert_eq!(s.sim_seconds, 10);
    assert!(s.to_string().contains("maxSimSeconds"));
    // A partial archive can still be written.
    assert!(!sim.archive().unwrap().is_empty());
}

#[test]
fn uncovered_plan_is_rejected_before_start() {
    let mut l = loaded(1, 1, StopCondition::AllTerminal);
    l.plan.participant_scripts[2].stages.remove(&StageId::from("election"));
    match Simulator::new(&l, SimOptions::default()) {
        Err(SimError::Plan(issues)) => assert_eq!(issues[0].path, "participantScripts[2].stages.election"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn captured_payloads_hold_no_private_ids() {
    let opts = SimOptions {
        capture_participant_payloads: true,
        ..SimOptions::default()
    };
    let sim = simulate(&loaded(2, 9, StopCondition::AllTerminal), opts).unwrap();
    assert!(sim.participant_payloads().len() > 50);
    let taints = taint::private_id_taints(&sim.private_ids());
    let found = taint::scan(
        sim.participant_payloads()
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("payload {i}"), p.as_bytes())),
        &taints,
    );
    assert!(found.is_empty(), "{found:?}");
    assert!(taint::scan_archive(&sim.archive().unwrap(), &taints).unwrap().is_empty());
}
