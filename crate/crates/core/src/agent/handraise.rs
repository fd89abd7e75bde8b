//! Hand-raising rounds, typing-delay scheduling and agent stage completion.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::agent::prompt::{assemble_prompt, StageContext};
use crate::agent::spec::{AgentSpec, PromptItem};
use crate::agent::structured::{parse_structured_output, StructuredOutput};
use crate::chat::ChatMessage;
use crate::ids::{derive_seed, seeded_rng, AgentId, CohortId, ExperimenterId, QuestionId, StageId};
use crate::llm::{Attempt, ChatCompletionRequest, Gateway, LlmError, TokenCounts};
use crate::model::answer::{AnswerContent, AnswerValue};
use crate::model::stage::{SelectionMode, StageConfig, StageParams, SurveyStageParams};
use crate::model::validate::answer_fits;
use crate::time::{Clock, Timestamp};

/// Attempts allowed for an agent to produce a valid stage answer.
pub const MAX_STAGE_ATTEMPTS: u32 = 3;

pub fn word_count(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

/// Milliseconds needed to type `words` at `wpm`.
pub fn typing_delay_ms(words: u32, wpm: f64) -> i64 {
    if words == 0 || wpm <= 0.0 {
        return 0;
    }
    (f64::from(words) / wpm * 60_000.0).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliverySchedule {
    pub agent_id: AgentId,
    pub draft: StructuredOutput,
    pub word_count: u32,
    pub wpm: f64,
    pub decision_at: Timestamp,
    pub deliver_at: Timestamp,
}

impl DeliverySchedule {
    pub fn new(agent_id: AgentId, draft: StructuredOutput, wpm: f64, decision_at: Timestamp, throttle: bool) -> Self {
        let words = word_count(&draft.response);
        let delay = if throttle { typing_delay_ms(words, wpm) } else { 0 };
        DeliverySchedule {
            agent_id,
            draft,
            word_count: words,
            wpm,
            decision_at,
            deliver_at: Timestamp(decision_at.0 + delay),
        }
    }
}

/// One provider call made on behalf of an agent. Visible to experimenters only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentCallLog {
    pub id: String,
    pub agent_id: AgentId,
    pub cohort_id: CohortId,
    pub stage_id: StageId,
    pub timestamp: Timestamp,
    pub assembled_prompt: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_output: Option<StructuredOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub selected: bool,
    #[serde(default)]
    pub attempts: Vec<Attempt>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub token_counts: TokenCounts,
}

/// Whether a parsed output volunteers to speak under the agent's gate.
pub fn is_candidate(spec: &AgentSpec, out: &StructuredOutput) -> bool {
    if !out.should_respond {
        return false;
    }
    match &spec.response_gate {
        None => true,
        Some(gate) => out
            .field(&gate.field_name)
            .and_then(|v| v.as_f64())
            .is_some_and(|v| v >= gate.threshold),
    }
}

type AnswerCheck = Box<dyn Fn(&str) -> Result<AnswerContent, String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub wpm: f64,
    pub words: u32,
}

/// Index of the selected candidate. `WeightedByWpm` samples with probability
/// proportional to wpm; `FastestWins` takes the shortest typing time, earliest
/// candidate on ties.
pub fn select_winner(candidates: &[Candidate], mode: SelectionMode, seed: u64) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    match mode {
        SelectionMode::WeightedByWpm => {
            let weights: Vec<f64> = candidates.iter().map(|c| c.wpm.max(0.0)).collect();
            let dist = WeightedIndex::new(&weights).ok()?;
            Some(dist.sample(&mut seeded_rng(seed)))
        }
        SelectionMode::FastestWins => {
            let mut best = 0;
            for (i, c) in candidates.iter().enumerate().skip(1) {
                let b = &candidates[best];
                // Compare words/wpm without division: w_i * r_b < w_b * r_i.
                if f64::from(c.words) * b.wpm < f64::from(b.words) * c.wpm {
                    best = i;
                }
            }
            Some(best)
        }
    }
}

/// Everything a round needs, captured while the cohort is locked.
#[derive(Debug, Clone)]
pub struct RoundRequest {
    pub round_id: u64,
    pub cohort_id: CohortId,
    pub stage: StageConfig,
    pub agents: Vec<AgentSpec>,
    pub transcript: Vec<ChatMessage>,
    pub context: BTreeMap<StageId, StageContext>,
    pub seed: u64,
    pub throttle: bool,
    pub selection: SelectionMode,
    /// Creator of the experiment; keys resolve only for them.
    pub creator: ExperimenterId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub winner: Option<DeliverySchedule>,
    pub logs: Vec<AgentCallLog>,
    /// Latest readyToEndChat per agent that produced a parsed output.
    pub readiness: BTreeMap<AgentId, bool>,
}

fn round_seed(req: &RoundRequest) -> u64 {
    derive_seed(
        req.seed,
        &["round", req.cohort_id.as_str(), req.stage.id.as_str(), &req.round_id.to_string()],
    )
}

fn call_agent(
    req: &RoundRequest,
    spec: &AgentSpec,
    gateway: &Gateway,
    clock: &dyn Clock,
) -> (AgentCallLog, Option<StructuredOutput>) {
    let timestamp = clock.now();
    let mut log = AgentCallLog {
        id: format!("{}/{}/{}/{}", req.cohort_id, req.stage.id, req.round_id, spec.id),
        agent_id: spec.id.clone(),
        cohort_id: req.cohort_id.clone(),
        stage_id: req.stage.id.clone(),
        timestamp,
        assembled_prompt: String::new(),
        raw_response: String::new(),
        parsed_output: None,
        parse_error: None,
        selected: false,
        attempts: Vec::new(),
        latency_ms: 0,
        token_counts: TokenCounts::default(),
    };
    let prompt = match assemble_prompt(spec, &req.stage, &req.transcript, &req.context) {
        Ok(p) => p,
        Err(e) => {
            log.parse_error = Some(e.to_string());
            return (log, None);
        }
    };
    log.assembled_prompt = prompt.clone();
    let outcome = gateway
        .provider_config(&req.creator, &spec.model)
        .map(|cfg| {
            gateway.complete(
                &cfg,
                &req.creator,
                &ChatCompletionRequest::single_user(prompt, spec.model.sampling_params.clone()),
            )
        });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            log.parse_error = Some(format!("provider error: {e}"));
            return (log, None);
        }
    };
    log.attempts = outcome.attempts;
    match outcome.result {
        Ok(resp) => {
            log.latency_ms = resp.latency_ms;
            log.token_counts = resp.token_counts;
            log.raw_response = resp.content;
            match parse_structured_output(&log.raw_response, &spec.effective_schema()) {
                Ok(out) => {
                    log.parsed_output = Some(out.clone());
                    (log, Some(out))
                }
                Err(e) => {
                    log.parse_error = Some(e.to_string());
                    (log, None)
                }
            }
        }
        Err(e) => {
            log.parse_error = Some(format!("provider error: {e}"));
            (log, None)
        }
    }
}

/// Queries every agent once (concurrently), then selects at most one speaker.
/// Provider failures become logs with a parse error; the round never fails.
pub fn run_hand_raising_round(req: &RoundRequest, gateway: &Gateway, clock: &dyn Clock) -> RoundOutcome {
    let results: Vec<(AgentCallLog, Option<StructuredOutput>)> = if req.agents.len() <= 1 {
        req.agents.iter().map(|a| call_agent(req, a, gateway, clock)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = req
                .agents
                .iter()
                .map(|a| s.spawn(move || call_agent(req, a, gateway, clock)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("agent call panicked")).collect()
        })
    };
    select_from_results(req, results, clock.now())
}

/// Selection half of a round, separated so the weighting can be exercised
/// without a provider.
pub fn select_from_results(
    req: &RoundRequest,
    results: Vec<(AgentCallLog, Option<StructuredOutput>)>,
    decided_at: Timestamp,
) -> RoundOutcome {
    let mut readiness = BTreeMap::new();
    let mut cand_idx = Vec::new();
    let mut cands = Vec::new();
    for (i, (spec, (_, out))) in req.agents.iter().zip(&results).enumerate() {
        if let Some(out) = out {
            readiness.insert(spec.id.clone(), out.ready_to_end_chat);
            if is_candidate(spec, out) {
                cand_idx.push(i);
                cands.push(Candidate {
                    wpm: spec.wpm,
                    words: word_count(&out.response),
                });
            }
        }
    }
    let mut logs: Vec<AgentCallLog> = Vec::with_capacity(results.len());
    let mut outputs = Vec::with_capacity(results.len());
    for (log, out) in results {
        logs.push(log);
        outputs.push(out);
    }
    let winner = select_winner(&cands, req.selection, round_seed(req)).map(|k| {
        let i = cand_idx[k];
        logs[i].selected = true;
        let spec = &req.agents[i];
        DeliverySchedule::new(
            spec.id.clone(),
            outputs[i].clone().expect("candidate has output"),
            spec.wpm,
            decided_at,
            req.throttle,
        )
    });
    RoundOutcome {
        winner,
        logs,
        readiness,
    }
}

/// What an agent participant does at a non-chat stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageAction {
    /// Advance without storing anything.
    Advance,
    Submit(AnswerContent),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentStageError {
    #[error("agent gave no valid answer after {attempts} attempts: {last}")]
    NoValidAnswer { attempts: u32, last: String },
    #[error(transparent)]
    Provider(#[from] LlmError),
}

/// Inputs for one agent participant at one stage.
#[derive(Debug, Clone)]
pub struct StageTask {
    pub cohort_id: CohortId,
    pub spec: AgentSpec,
    pub stage: StageConfig,
    /// Ranking candidates for peer elections, or items.
    pub candidates: Vec<String>,
    pub context: BTreeMap<StageId, StageContext>,
    pub creator: ExperimenterId,
    /// Distinguishes repeated tasks in log ids.
    pub task_id: u64,
}

fn persona_prompt(task: &StageTask) -> String {
    let mut spec = task.spec.clone();
    spec.prompt_plan.retain(|i| !matches!(i, PromptItem::ChatHistory | PromptItem::SystemInstructions));
    let head = assemble_prompt(&spec, &task.stage, &[], &task.context).unwrap_or_default();
    let mut s = head;
    if !s.is_empty() {
        s.push_str("\n\n");
    }
    s.push_str(&format!("Stage: {}", task.stage.title));
    if !task.stage.markdown_body.is_empty() {
        s.push('\n');
        s.push_str(&task.stage.markdown_body);
    }
    s
}

fn survey_prompt(task: &StageTask, survey: &SurveyStageParams) -> String {
    let mut s = persona_prompt(task);
    s.push_str("\n\nAnswer every question. Reply with one JSON object of the form {\"answers\": {\"<questionId>\": <answer>}} where <answer> is {\"type\": \"text\", \"value\": \"...\"}, {\"type\": \"choice\", \"value\": \"<optionId>\"}, {\"type\": \"choices\", \"value\": [\"<optionId>\"]} or {\"type\": \"scale\", \"value\": <integer>}.");
    for q in &survey.questions {
        s.push_str(&format!("\n- {} ({:?}): {}", q.id, q.kind, q.prompt));
        for o in &q.options {
            s.push_str(&format!("\n    {}: {}", o.id, o.text));
        }
        if let Some(b) = &q.scale_bounds {
            s.push_str(&format!("\n    scale {}..{}", b.min, b.max));
        }
    }
    s
}

fn ranking_prompt(task: &StageTask) -> String {
    let mut s = persona_prompt(task);
    s.push_str("\n\nRank all of the following, best first. Reply with one JSON object {\"ranking\": [...]} listing every id exactly once:");
    for c in &task.candidates {
        s.push_str(&format!("\n- {c}"));
    }
    s
}

/// First JSON object in `raw` that has `key`.
fn find_object_with(raw: &str, key: &str) -> Option<serde_json::Value> {
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = stream.next() {
            if v.get(key).is_some() {
                return Some(v);
            }
        }
    }
    None
}

fn check_survey(raw: &str, survey: &SurveyStageParams) -> Result<AnswerContent, String> {
    let v = find_object_with(raw, "answers").ok_or("no answers object")?;
    let answers: BTreeMap<QuestionId, AnswerValue> =
        serde_json::from_value(v["answers"].clone()).map_err(|e| format!("malformed answers: {e}"))?;
    for q in &survey.questions {
        let a = answers.get(&q.id).ok_or_else(|| format!("question '{}' unanswered", q.id))?;
        if !answer_fits(q, a) {
            return Err(format!("answer to '{}' does not fit the question", q.id));
        }
    }
    Ok(AnswerContent::Survey { answers })
}

fn check_ranking(raw: &str, candidates: &[String]) -> Result<AnswerContent, String> {
    let v = find_object_with(raw, "ranking").ok_or("no ranking object")?;
    let ranking: Vec<String> = serde_json::from_value(v["ranking"].clone()).map_err(|e| format!("malformed ranking: {e}"))?;
    let got: BTreeSet<&String> = ranking.iter().collect();
    let want: BTreeSet<&String> = candidates.iter().collect();
    if ranking.len() != candidates.len() || got != want {
        return Err("ranking is not a permutation of the candidates".to_string());
    }
    Ok(AnswerContent::Ranking { ranking })
}

/// Decides an agent participant's answer for a non-chat stage. Stages that
/// collect nothing are acknowledged without a provider call; answers are
/// validated like a human submission and retried up to
/// [`MAX_STAGE_ATTEMPTS`] times.
pub fn complete_agent_stage(
    task: &StageTask,
    gateway: &Gateway,
    clock: &dyn Clock,
) -> (Result<StageAction, AgentStageError>, Vec<AgentCallLog>) {
    let mut logs = Vec::new();
    let (prompt, check): (String, AnswerCheck) = match &task.stage.params {
        StageParams::TermsOfService => return (Ok(StageAction::Submit(AnswerContent::Acknowledged)), logs),
        StageParams::Profile(_) => {
            let profile = crate::model::answer::Profile {
                display_name: task.spec.profile.display_name.clone(),
                avatar: task.spec.profile.avatar.clone(),
                pronouns: String::new(),
            };
            return (Ok(StageAction::Submit(AnswerContent::Profile { profile })), logs);
        }
        StageParams::Survey(s) | StageParams::Comprehension(s) => {
            let s = s.clone();
            (survey_prompt(task, &s), Box::new(move |raw| check_survey(raw, &s)))
        }
        StageParams::RankingElection(_) => {
            let c = task.candidates.clone();
            (ranking_prompt(task), Box::new(move |raw| check_ranking(raw, &c)))
        }
        _ => return (Ok(StageAction::Advance), logs),
    };

    let cfg = match gateway.provider_config(&task.creator, &task.spec.model) {
        Ok(c) => c,
        Err(e) => return (Err(e.into()), logs),
    };
    let mut last = String::new();
    for attempt in 0..MAX_STAGE_ATTEMPTS {
        let req = ChatCompletionRequest::single_user(prompt.clone(), task.spec.model.sampling_params.clone());
        let timestamp = clock.now();
        let out = gateway.complete(&cfg, &task.creator, &req);
        let mut log = AgentCallLog {
            id: format!("{}/{}/task{}/{}/{}", task.cohort_id, task.stage.id, task.task_id, task.spec.id, attempt),
            agent_id: task.spec.id.clone(),
            cohort_id: task.cohort_id.clone(),
            stage_id: task.stage.id.clone(),
            timestamp,
            assembled_prompt: prompt.clone(),
            raw_response: String::new(),
            parsed_output: None,
            parse_error: None,
            selected: false,
            attempts: out.attempts,
            latency_ms: 0,
            token_counts: TokenCounts::default(),
        };
        match out.result {
            Ok(resp) => {
                log.latency_ms = resp.latency_ms;
                log.token_counts = resp.token_counts;
                log.raw_response = resp.content;
                match check(&log.raw_response) {
                    Ok(content) => {
                        log.selected = true;
                        logs.push(log);
                        return (Ok(StageAction::Submit(content)), logs);
                    }
                    Err(e) => {
                        log.parse_error = Some(e.clone());
                        last = e;
                        logs.push(log);
                    }
                }
            }
            Err(e) => {
                log.parse_error = Some(format!("provider error: {e}"));
                logs.push(log);
                return (Err(e.into()), logs);
            }
        }
    }
    (
        Err(AgentStageError::NoValidAnswer {
            attempts: MAX_STAGE_ATTEMPTS,
            last,
        }),
        logs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::spec::{FieldType, ResponseGate, SchemaField};
    use crate::agent::structured::FieldValue;
    use crate::llm::{KeyStore, MasterKey, Script, ScriptedProvider};
    use crate::model::stage::{ChatStageParams, ElectionMode, ElectionStageParams, StageUi};
    use crate::time::ManualClock;
    use std::sync::Arc;

    fn out(should: bool, text: &str) -> StructuredOutput {
        StructuredOutput {
            should_respond: should,
            response: text.to_string(),
            ready_to_end_chat: false,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn typing_delay_is_words_over_wpm() {
        assert_eq!(typing_delay_ms(30, 60.0), 30_000);
        assert_eq!(typing_delay_ms(0, 60.0), 0);
        assert_eq!(typing_delay_ms(10, 30.0), 20_000);
        let words = vec!["w"; 30].join(" ");
        let s = DeliverySchedule::new("a".into(), out(true, &words), 60.0, Timestamp(1_000), true);
        assert_eq!(s.word_count, 30);
        assert_eq!(s.deliver_at.0 - s.decision_at.0, 30_000);
        let s = DeliverySchedule::new("a".into(), out(true, &words), 60.0, Timestamp(1_000), false);
        assert_eq!(s.deliver_at, s.decision_at);
    }

    #[test]
    fn response_gate_threshold() {
        let mut spec = AgentSpec::simple_mediator("safety", "Safety", "", "scripted");
        spec.structured_output_schema = vec![SchemaField::new("severityScore", FieldType::Int, "1-5")];
        spec.response_gate = Some(ResponseGate {
            field_name: "severityScore".into(),
            threshold: 4.0,
        });
        let mut o = out(true, "please be kind");
        o.extra.insert("severityScore".into(), FieldValue::Int(3));
        assert!(!is_candidate(&spec, &o));
        o.extra.insert("severityScore".into(), FieldValue::Int(5));
        assert!(is_candidate(&spec, &o));
        o.extra.clear();
        assert!(!is_candidate(&spec, &o));
    }

    #[test]
    fn fastest_wins_picks_shortest_typing_time() {
        let c = [
            Candidate { wpm: 30.0, words: 10 },
            Candidate { wpm: 60.0, words: 10 },
            Candidate { wpm: 120.0, words: 20 },
        ];
        // 20 s, 10 s, 10 s: earliest of the tied pair.
        assert_eq!(select_winner(&c, SelectionMode::FastestWins, 0), Some(1));
        assert_eq!(select_winner(&[], SelectionMode::WeightedByWpm, 0), None);
    }

    fn chat_stage() -> StageConfig {
        StageConfig {
            id: "chat".into(),
            title: "Chat".into(),
            markdown_body: String::new(),
            ui: StageUi::default(),
            params: StageParams::GroupChat(ChatStageParams::default()),
        }
    }

    fn gateway(script: &str, clock: &ManualClock) -> Gateway {
        let mut gw = Gateway::new(
            KeyStore::in_memory(MasterKey::random()),
            Arc::new(clock.clone()),
            Arc::new(clock.clone()),
        );
        let script: Script = serde_json::from_str(script).unwrap();
        gw.register_provider("scripted", "scripted://", Arc::new(ScriptedProvider::new(script).unwrap()));
        gw
    }

    #[test]
    fn single_agent_declining_yields_no_winner() {
        let clock = ManualClock::new(Timestamp(0));
        let gw = gateway(r#"{"entries": []}"#, &clock);
        let req = RoundRequest {
            round_id: 1,
            cohort_id: "c1".into(),
            stage: chat_stage(),
            agents: vec![AgentSpec::simple_mediator("m", "Mod", "ensure politeness", "scripted")],
            transcript: Vec::new(),
            context: BTreeMap::new(),
            seed: 7,
            throttle: true,
            selection: SelectionMode::WeightedByWpm,
            creator: "owner@lab".into(),
        };
        let r = run_hand_raising_round(&req, &gw, &clock);
        assert!(r.winner.is_none());
        assert_eq!(r.logs.len(), 1);
        assert!(!r.logs[0].selected);
        assert_eq!(r.readiness.get(&AgentId::from("m")), Some(&true));
    }

    #[test]
    fn provider_failures_become_logs() {
        let clock = ManualClock::new(Timestamp(0));
        let gw = gateway(r#"{"entries": []}"#, &clock);
        let mut broken = AgentSpec::simple_mediator("x", "X", "", "missing-provider");
        broken.wpm = 10.0;
        let req = RoundRequest {
            round_id: 1,
            cohort_id: "c1".into(),
            stage: chat_stage(),
            agents: vec![broken, AgentSpec::simple_mediator("m", "Mod", "", "scripted")],
            transcript: Vec::new(),
            context: BTreeMap::new(),
            seed: 7,
            throttle: true,
            selection: SelectionMode::WeightedByWpm,
            creator: "owner@lab".into(),
        };
        let r = run_hand_raising_round(&req, &gw, &clock);
        assert_eq!(r.logs.len(), 2);
        assert!(r.logs[0].parse_error.as_deref().unwrap().contains("provider"));
        assert!(r.logs[1].parse_error.is_none());
    }

    #[test]
    fn ranking_answers_are_validated_and_retried() {
        let clock = ManualClock::new(Timestamp(0));
        let gw = gateway(
            r#"{"entries": [], "default": {"ranking": ["p-b", "p-a"]}}"#,
            &clock,
        );
        let mut spec = AgentSpec::simple_mediator("agent", "Agent", "", "scripted");
        spec.role = crate::agent::spec::AgentRole::Participant;
        let task = StageTask {
            cohort_id: "c1".into(),
            spec,
            stage: StageConfig {
                id: "vote".into(),
                title: "Vote".into(),
                markdown_body: String::new(),
                ui: StageUi::default(),
                params: StageParams::RankingElection(ElectionStageParams {
                    mode: ElectionMode::Peers,
                    items: Vec::new(),
                    allow_self_vote: false,
                }),
            },
            candidates: vec!["p-a".into(), "p-b".into()],
            context: BTreeMap::new(),
            creator: "owner@lab".into(),
            task_id: 1,
        };
        let (r, logs) = complete_agent_stage(&task, &gw, &clock);
        assert_eq!(
            r.unwrap(),
            StageAction::Submit(AnswerContent::Ranking {
                ranking: vec!["p-b".into(), "p-a".into()]
            })
        );
        assert_eq!(logs.len(), 1);

        let mut bad = task.clone();
        bad.candidates.push("p-c".into());
        let (r, logs) = complete_agent_stage(&bad, &gw, &clock);
        assert!(matches!(r, Err(AgentStageError::NoValidAnswer { attempts: 3, .. })));
        assert_eq!(logs.len(), 3);
    }

    #[test]
    fn info_stage_needs_no_call() {
        let clock = ManualClock::new(Timestamp(0));
        let gw = gateway(r#"{"entries": []}"#, &clock);
        let task = StageTask {
            cohort_id: "c1".into(),
            spec: AgentSpec::simple_mediator("agent", "Agent", "", "scripted"),
            stage: StageConfig {
                id: "info".into(),
                title: "Info".into(),
                markdown_body: String::new(),
                ui: StageUi::default(),
                params: StageParams::Info,
            },
            candidates: Vec::new(),
            context: BTreeMap::new(),
            creator: "owner@lab".into(),
            task_id: 1,
        };
        let (r, logs) = complete_agent_stage(&task, &gw, &clock);
        assert_eq!(r.unwrap(), StageAction::Advance);
        assert!(logs.is_empty());
    }
}
