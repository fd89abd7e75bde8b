use std::sync::Arc;

use super::*;
use crate::agent::handraise::{complete_agent_stage, run_hand_raising_round};
use crate::llm::{Gateway, KeyStore, MasterKey, Script, ScriptedProvider};
use crate::model::answer::AnswerValue;
use crate::model::stage::{StageUi, SurveyQuestion, SurveyStageParams, QuestionKind, ChoiceOption};
use crate::model::templates::{lost_at_sea, LOST_AT_SEA_KEY};
use crate::time::ManualClock;

const CREATOR: &str = "owner@lab";

fn t(s: i64) -> Timestamp {
    Timestamp::from_secs(s)
}

fn exp() -> Actor {
    Actor::Experimenter { id: CREATOR.into() }
}

fn me(id: &PublicId) -> Actor {
    Actor::Participant { public_id: id.clone() }
}

fn engine(config: ExperimentConfig) -> Engine {
    Engine::create(config, 42, IdGen::seeded(7), None, t(0)).unwrap()
}

fn gateway(clock: &ManualClock, script: &str) -> Gateway {
    let mut gw = Gateway::new(
        KeyStore::in_memory(MasterKey::random()),
        Arc::new(clock.clone()),
        Arc::new(clock.clone()),
    );
    let script: Script = serde_json::from_str(script).unwrap();
    gw.register_provider("scripted", "scripted://", Arc::new(ScriptedProvider::new(script).unwrap()));
    gw
}

/// Runs every outstanding provider job to completion at `now`.
fn pump(e: &mut Engine, gw: &Gateway, clock: &ManualClock, now: Timestamp) {
    for _ in 0..100 {
        let jobs = e.take_jobs();
        if jobs.is_empty() {
            return;
        }
        for job in jobs {
            clock.set(now);
            match job {
                Job::Round(r) => {
                    let out = run_hand_raising_round(&r.request, gw, clock);
                    e.finish_round(&r, out, now).unwrap();
                }
                Job::Stage(s) => {
                    let (res, logs) = complete_agent_stage(&s.task, gw, clock);
                    e.finish_stage_task(&s, res, logs, now).unwrap();
                }
            }
        }
    }
    panic!("jobs did not drain");
}

fn join_all(e: &mut Engine, cohort: &CohortId, n: usize, now: Timestamp) -> Vec<PublicId> {
    (0..n)
        .map(|i| {
            let np = e
                .add_participant(exp(), cohort, Some(format!("EXT{i}")), None, now)
                .unwrap();
            e.join(&np.private_id.digest(), now).unwrap()
        })
        .collect()
}

fn stage_of(e: &Engine, id: &PublicId) -> String {
    let p = &e.state().participants[id];
    e.state()
        .stage_at(p.current_stage_index)
        .map(|s| s.id.to_string())
        .unwrap_or_else(|| "done".into())
}

fn correct_leader_answers() -> AnswerContent {
    AnswerContent::Survey {
        answers: LOST_AT_SEA_KEY
            .iter()
            .enumerate()
            .map(|(i, k)| {
                (
                    QuestionId::from(format!("q{}", i + 1)),
                    AnswerValue::Choice(if *k == 0 { "a" } else { "b" }.into()),
                )
            })
            .collect(),
    }
}

/// Drives one participant through Lost-at-Sea stages up to the chat.
fn to_chat(e: &mut Engine, id: &PublicId, now: Timestamp) {
    e.advance(me(id), id, None, now).unwrap();
    e.advance(me(id), id, None, now).unwrap();
}

#[test]
fn lost_at_sea_cohort_runs_to_completion() {
    let clock = ManualClock::new(t(0));
    let gw = gateway(&clock, r#"{"entries": []}"#);
    let mut e = engine(lost_at_sea(CREATOR));
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 4, t(1));
    for id in &ids {
        assert_eq!(stage_of(&e, id), "profile");
        assert!(e.state().participants[id].profile.is_some(), "pseudonym assigned on arrival");
        to_chat(&mut e, id, t(2));
    }
    let names: BTreeSet<String> = ids.iter().map(|i| e.state().participants[i].display_name()).collect();
    assert_eq!(names.len(), 4, "pseudonyms unique within cohort");

    e.send_chat(me(&ids[0]), &ids[0], "hello all", t(3)).unwrap();
    pump(&mut e, &gw, &clock, t(3));
    assert_eq!(
        e.advance(me(&ids[0]), &ids[0], None, t(4)).unwrap_err().reason(),
        Some("chatInProgress")
    );
    for id in &ids {
        e.vote_end_chat(me(id), id, t(5)).unwrap();
        pump(&mut e, &gw, &clock, t(5));
    }
    assert!(e.state().cohorts[&c].chats[&StageId::from("chat")].ended);

    for id in &ids {
        e.advance(me(id), id, None, t(6)).unwrap();
    }
    // Everyone votes for the lexicographically first other member.
    for id in &ids {
        let mut others: Vec<String> = ids.iter().filter(|o| *o != id).map(|o| o.to_string()).collect();
        others.sort();
        e.advance(me(id), id, Some(AnswerContent::Ranking { ranking: others }), t(7)).unwrap();
    }
    let election = &e.state().cohorts[&c].elections[&StageId::from("election")];
    assert!(election.complete);
    for id in &ids {
        e.advance(me(id), id, Some(correct_leader_answers()), t(8)).unwrap();
    }
    assert!(e.state().cohorts[&c].reveals.contains_key(&StageId::from("reveal")));
    for id in &ids {
        e.advance(me(id), id, None, t(9)).unwrap();
        let row = &e.state().payouts[id];
        assert_eq!(row.bonus.0, 300, "six correct answers at 0.50");
        assert_eq!(row.total.0, 800);
        e.advance(me(id), id, None, t(10)).unwrap();
        assert_eq!(e.state().participants[id].status, ParticipantStatus::Completed);
    }
}

#[test]
fn wait_gate_opens_only_for_last_arrival_in_every_order() {
    for order in permutations(4) {
        let mut e = engine(lost_at_sea(CREATOR));
        let c = e.create_cohort(exp(), "A", t(1)).unwrap();
        let ids = join_all(&mut e, &c, 4, t(1));
        for (k, &i) in order.iter().enumerate() {
            to_chat(&mut e, &ids[i], t(2 + k as i64));
            let open = e.state().cohorts[&c].gates.contains_key(&StageId::from("chat"));
            assert_eq!(open, k == 3, "order {order:?} after {k}");
            if k < 3 {
                let err = e.send_chat(me(&ids[i]), &ids[i], "hi", t(2)).unwrap_err();
                assert_eq!(err.reason(), Some("waitingForCohort"));
            }
        }
    }
}

/// All permutations of 0..n.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for i in 0..n {
            if !prefix.contains(&i) {
                prefix.push(i);
                go(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), n, &mut out);
    out
}

#[test]
fn booting_the_laggard_opens_the_gate() {
    let mut e = engine(lost_at_sea(CREATOR));
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 4, t(1));
    for id in &ids[..3] {
        to_chat(&mut e, id, t(2));
    }
    assert!(!e.state().cohorts[&c].gates.contains_key(&StageId::from("chat")));
    e.boot(exp(), &ids[3], t(3)).unwrap();
    assert_eq!(e.state().cohorts[&c].gates.get(&StageId::from("chat")), Some(&t(3)));
    assert!(matches!(e.boot(exp(), &ids[3], t(4)), Err(EngineError::AlreadyTerminal(_))));
}

#[test]
fn transfer_accept_moves_participant_between_cohorts() {
    let mut e = engine(lost_at_sea(CREATOR));
    let a = e.create_cohort(exp(), "A", t(1)).unwrap();
    let b = e.create_cohort(exp(), "B", t(1)).unwrap();
    let big = join_all(&mut e, &a, 4, t(1));
    let small = join_all(&mut e, &b, 3, t(1));
    for id in small.iter().chain(big.iter()) {
        to_chat(&mut e, id, t(2));
    }
    assert!(e.state().cohorts[&b].gates.contains_key(&StageId::from("chat")));
    let offer = e.offer_transfer(exp(), &big[0], &b, t(3)).unwrap();
    assert!(matches!(e.offer_transfer(exp(), &big[0], &b, t(3)), Err(EngineError::OfferAlreadyPending)));
    assert_eq!(e.state().offers[&offer].state, OfferState::Pending);
    e.respond_transfer(me(&big[0]), &big[0], true, t(4)).unwrap();
    assert_eq!(e.state().participants[&big[0]].cohort_id, b);
    assert_eq!(e.state().cohorts[&b].member_public_ids.len(), 4);
    assert_eq!(e.state().cohorts[&a].member_public_ids.len(), 3);
}

#[test]
fn expired_offer_cannot_be_accepted() {
    let mut e = engine(lost_at_sea(CREATOR));
    let a = e.create_cohort(exp(), "A", t(1)).unwrap();
    let b = e.create_cohort(exp(), "B", t(1)).unwrap();
    let ids = join_all(&mut e, &a, 1, t(1));
    e.offer_transfer(exp(), &ids[0], &b, t(2)).unwrap();
    let late = t(2 + 121);
    assert!(matches!(e.respond_transfer(me(&ids[0]), &ids[0], true, late), Err(EngineError::OfferExpired)));
    assert_eq!(e.state().participants[&ids[0]].cohort_id, a);
    assert!(matches!(e.respond_transfer(me(&ids[0]), &ids[0], true, late), Err(EngineError::NoPendingOffer)));
}

#[test]
fn locked_cohort_rejects_new_participants_and_joins() {
    let mut e = engine(lost_at_sea(CREATOR));
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let np = e.add_participant(exp(), &c, None, None, t(1)).unwrap();
    e.lock_cohort(exp(), &c, t(2)).unwrap();
    let before = e.records().len();
    e.lock_cohort(exp(), &c, t(2)).unwrap();
    assert_eq!(e.records().len(), before, "second lock is a no-op");
    assert!(matches!(e.add_participant(exp(), &c, None, None, t(3)), Err(EngineError::CohortLocked(_))));
    assert!(matches!(e.join(&np.private_id.digest(), t(3)), Err(EngineError::CohortLocked(_))));
}

fn quiz_config() -> ExperimentConfig {
    let mut cfg = lost_at_sea(CREATOR);
    let quiz = StageConfig {
        id: "quiz".into(),
        title: "Check".into(),
        markdown_body: String::new(),
        ui: StageUi::default(),
        params: StageParams::Comprehension(SurveyStageParams {
            questions: vec![SurveyQuestion {
                id: "q".into(),
                kind: QuestionKind::MultipleChoice,
                prompt: "Pick yes".into(),
                options: vec![
                    ChoiceOption { id: "yes".into(), text: "Yes".into() },
                    ChoiceOption { id: "no".into(), text: "No".into() },
                ],
                scale_bounds: None,
                correct_answer: Some(AnswerValue::Choice("yes".into())),
            }],
            exclude_self: false,
        }),
    };
    cfg.stages.insert(1, quiz);
    cfg
}

#[test]
fn comprehension_failures_count_attempts_and_block() {
    let mut e = engine(quiz_config());
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 1, t(1));
    let id = &ids[0];
    e.advance(me(id), id, None, t(2)).unwrap();
    let wrong = AnswerContent::survey([("q", AnswerValue::Choice("no".into()))]);
    for attempt in 1..=2 {
        match e.advance(me(id), id, Some(wrong.clone()), t(3)) {
            Err(EngineError::ComprehensionFailed { attempt: a, per_question }) => {
                assert_eq!(a, attempt);
                assert_eq!(per_question.get(&QuestionId::from("q")), Some(&false));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(stage_of(&e, id), "quiz");
    }
    let right = AnswerContent::survey([("q", AnswerValue::Choice("yes".into()))]);
    e.advance(me(id), id, Some(right), t(4)).unwrap();
    assert_eq!(stage_of(&e, id), "instructions");
}

#[test]
fn timer_submits_draft_and_advances() {
    let mut cfg = lost_at_sea(CREATOR);
    cfg.stages[1].ui.auto_advance_timer_seconds = Some(30);
    let mut e = engine(cfg);
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 1, t(1));
    e.advance(me(&ids[0]), &ids[0], None, t(10)).unwrap();
    assert_eq!(e.next_deadline(), Some(t(40)));
    e.tick(t(39)).unwrap();
    assert_eq!(stage_of(&e, &ids[0]), "instructions");
    e.tick(t(40)).unwrap();
    assert_eq!(stage_of(&e, &ids[0]), "chat");
}

#[test]
fn attention_checks_pass_or_expire() {
    let mut e = engine(lost_at_sea(CREATOR));
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 2, t(1));
    e.send_attention_check(exp(), &ids[0], 60, t(2)).unwrap();
    e.send_attention_check(exp(), &ids[1], 60, t(2)).unwrap();
    assert!(matches!(
        e.send_attention_check(exp(), &ids[0], 60, t(2)),
        Err(EngineError::CheckAlreadyPending)
    ));
    assert_eq!(e.acknowledge_attention_check(&ids[0], t(62)).unwrap(), CheckState::Passed);
    e.tick(t(63)).unwrap();
    let s = e.state().attention_stats();
    assert_eq!((s.sent, s.passed, s.failed), (2, 1, 1));
    assert!(e.state().notices.iter().any(|n| n.public_id.as_ref() == Some(&ids[1])));
}

#[test]
fn mediator_reply_is_delivered_after_typing_delay() {
    let clock = ManualClock::new(t(0));
    let gw = gateway(
        &clock,
        r#"{"entries": [{"match": {"contains": "hello"}, "response": {"shouldRespond": true, "response": "one two three four five six", "readyToEndChat": false}}]}"#,
    );
    let mut e = engine(lost_at_sea(CREATOR));
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 4, t(1));
    for id in &ids {
        to_chat(&mut e, id, t(2));
    }
    e.send_chat(me(&ids[0]), &ids[0], "hello", t(10)).unwrap();
    pump(&mut e, &gw, &clock, t(10));
    let key = StageId::from("chat");
    assert!(matches!(e.state().cohorts[&c].chats[&key].slot, Slot::Typing { .. }));
    assert_eq!(e.next_deadline(), Some(t(16)), "six words at 60 wpm");
    e.tick(t(16)).unwrap();
    let chat = &e.state().cohorts[&c].chats[&key];
    assert_eq!(chat.messages.len(), 2);
    assert_eq!(chat.messages[1].display_name, "Facilitator");
    assert_eq!(chat.messages[1].timestamp, t(16));
    // The mediator is not ready, so unanimous votes do not end the chat.
    for id in &ids {
        e.vote_end_chat(me(id), id, t(17)).unwrap();
    }
    pump(&mut e, &gw, &clock, t(17));
    assert!(!e.state().cohorts[&c].chats[&key].ended);
}

#[test]
fn replay_matches_live_state() {
    let mut e = engine(lost_at_sea(CREATOR));
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    let ids = join_all(&mut e, &c, 4, t(1));
    for id in &ids {
        to_chat(&mut e, id, t(2));
    }
    e.send_chat(me(&ids[1]), &ids[1], "hi", t(3)).unwrap();
    e.boot(exp(), &ids[2], t(4)).unwrap();
    let replayed = ExperimentState::replay(e.records()).unwrap();
    assert_eq!(&replayed, e.state());
    let resumed = Engine::resume(e.records().to_vec(), None, IdGen::seeded(1), None).unwrap();
    assert_eq!(resumed.state(), e.state());
}

#[test]
fn stage_edits_freeze_once_participants_exist() {
    let mut e = engine(lost_at_sea(CREATOR));
    let stages = e.state().config.stages.clone();
    e.edit_stages(exp(), stages.clone(), t(1)).unwrap();
    let c = e.create_cohort(exp(), "A", t(1)).unwrap();
    e.add_participant(exp(), &c, None, None, t(1)).unwrap();
    assert!(matches!(e.edit_stages(exp(), stages, t(2)), Err(EngineError::EditFrozen)));
}

#[test]
fn per_stream_sequences_are_gapless() {
    let mut e = engine(lost_at_sea(CREATOR));
    let a = e.create_cohort(exp(), "A", t(1)).unwrap();
    let b = e.create_cohort(exp(), "B", t(1)).unwrap();
    join_all(&mut e, &a, 2, t(1));
    join_all(&mut e, &b, 3, t(1));
    let mut seen: BTreeMap<Option<CohortId>, u64> = BTreeMap::new();
    for (i, r) in e.records().iter().enumerate() {
        assert_eq!(r.index, i as u64);
        let last = seen.entry(r.cohort_id.clone()).or_insert(0);
        assert_eq!(r.sequence, *last + 1);
        *last = r.sequence;
    }
}
