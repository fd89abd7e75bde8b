//! Structural and cross-stage validation of experiment configs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::spec::{AgentRole, PromptItem};
use crate::model::answer::AnswerValue;
use crate::model::config::{AccessRole, ExperimentConfig};
use crate::model::stage::{
    ElectionMode, PayoutItem, ProfileMode, QuestionKind, RevealView, StageConfig, StageKind,
    StageParams, SurveyQuestion, SurveyStageParams, TransferStrategy,
};

pub const MIN_TIMER_SECONDS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub path: String,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            path: path.into(),
            severity: Severity::Error,
            message: message.into(),
        });
    }
}

/// Checks every config invariant. Never panics on structurally parsed input.
pub fn validate_experiment_config(config: &ExperimentConfig) -> ValidationReport {
    let mut report = ValidationReport::default();

    if config.stages.is_empty() {
        report.error("stages", "an experiment needs at least one stage");
    }

    let creators = config.roles.values().filter(|r| **r == AccessRole::Creator).count();
    if creators != 1 {
        report.error("roles", format!("expected exactly one creator, found {creators}"));
    }

    let mut seen = HashSet::new();
    for (i, stage) in config.stages.iter().enumerate() {
        if !seen.insert(&stage.id) {
            report.error(format!("stages[{i}].id"), format!("duplicate stage id '{}'", stage.id));
        }
    }

    let index_of: HashMap<_, _> = config
        .stages
        .iter()
        .enumerate()
        .rev()
        .map(|(i, s)| (&s.id, i))
        .collect();

    let first_profile = config.stages.iter().position(|s| s.kind() == StageKind::Profile);

    for (i, stage) in config.stages.iter().enumerate() {
        let base = format!("stages[{i}]");
        check_ui(stage, &base, &mut report);
        check_params(config, stage, &base, &mut report);

        for (path, target) in stage.references() {
            match index_of.get(target) {
                None => report.error(
                    format!("{base}.{path}"),
                    format!("stage '{}' references unknown stage '{}'", stage.id, target),
                ),
                Some(&j) if j >= i => report.error(
                    format!("{base}.{path}"),
                    format!(
                        "stage '{}' references stage '{}' which does not precede it",
                        stage.id, target
                    ),
                ),
                Some(_) => {}
            }
        }

        if displays_profiles(stage) && !first_profile.is_some_and(|p| p < i) {
            report.error(
                base.clone(),
                format!("stage '{}' displays profiles but no Profile stage precedes it", stage.id),
            );
        }
    }

    check_agents(config, &index_of, &mut report);
    report
}

fn displays_profiles(stage: &StageConfig) -> bool {
    match &stage.params {
        StageParams::GroupChat(_) | StageParams::Reveal(_) => true,
        StageParams::RankingElection(e) => e.mode == ElectionMode::Peers,
        _ => false,
    }
}

fn check_ui(stage: &StageConfig, base: &str, report: &mut ValidationReport) {
    let kind = stage.kind();
    if stage.ui.wait_for_all_participants && !kind.is_group() {
        report.error(
            format!("{base}.ui.waitForAllParticipants"),
            format!("{kind:?} stages cannot wait for all participants"),
        );
    }
    if let Some(t) = stage.ui.auto_advance_timer_seconds {
        if t < MIN_TIMER_SECONDS {
            report.error(
                format!("{base}.ui.autoAdvanceTimerSeconds"),
                format!("timer must be at least {MIN_TIMER_SECONDS} seconds, got {t}"),
            );
        }
        if kind == StageKind::Comprehension {
            report.error(
                format!("{base}.ui.autoAdvanceTimerSeconds"),
                "comprehension stages cannot auto-advance past an ungraded answer",
            );
        }
    }
    if let Some(min) = stage.ui.min_participants {
        if !stage.ui.wait_for_all_participants {
            report.error(
                format!("{base}.ui.minParticipants"),
                "minParticipants requires waitForAllParticipants",
            );
        }
        if min == 0 {
            report.error(format!("{base}.ui.minParticipants"), "must be positive");
        }
    }
}

fn check_params(config: &ExperimentConfig, stage: &StageConfig, base: &str, report: &mut ValidationReport) {
    let kp = format!("{base}.kindParams");
    match &stage.params {
        StageParams::Profile(p) => {
            let assigned = p.mode == ProfileMode::AssignedPseudonym;
            if assigned != p.pseudonym_set.is_some() {
                report.error(
                    format!("{kp}.pseudonymSet"),
                    "pseudonymSet must be present exactly when mode is assignedPseudonym",
                );
            }
        }
        StageParams::Survey(s) | StageParams::SurveyPerParticipant(s) => {
            check_survey(s, false, &kp, report);
        }
        StageParams::Comprehension(s) => check_survey(s, true, &kp, report),
        StageParams::GroupChat(c) | StageParams::PrivateChat(c) => {
            for (j, m) in c.mediators.iter().enumerate() {
                match config.agent(m) {
                    None => report.error(format!("{kp}.mediators[{j}]"), format!("unknown agent '{m}'")),
                    Some(a) if a.role != AgentRole::Mediator => report.error(
                        format!("{kp}.mediators[{j}]"),
                        format!("agent '{m}' is not a mediator"),
                    ),
                    Some(_) => {}
                }
            }
            if c.end_quorum == Some(0) {
                report.error(format!("{kp}.endQuorum"), "must be positive");
            }
        }
        StageParams::Transfer(t) => {
            if t.target_cohort_size == 0 {
                report.error(format!("{kp}.targetCohortSize"), "must be positive");
            }
            if t.timeout_seconds == 0 {
                report.error(format!("{kp}.timeoutSeconds"), "must be positive");
            }
            match t.strategy {
                TransferStrategy::ByArrivalOrder => {
                    if !t.composition.is_empty() {
                        report.error(format!("{kp}.composition"), "only used by byAttributeComposition");
                    }
                }
                TransferStrategy::ByAttributeComposition => {
                    if t.composition.len() != 1 {
                        report.error(
                            format!("{kp}.composition"),
                            "byAttributeComposition needs exactly one composition rule",
                        );
                    }
                }
            }
            for (j, rule) in t.composition.iter().enumerate() {
                let sum: u32 = rule.required_counts.values().sum();
                if sum != t.target_cohort_size {
                    report.error(
                        format!("{kp}.composition[{j}].requiredCounts"),
                        format!("counts sum to {sum}, expected targetCohortSize {}", t.target_cohort_size),
                    );
                }
                if let Some(src) = config.stage(&rule.survey_stage_id) {
                    match src.params.survey() {
                        Some(s) if s.question(&rule.question_id).is_some() => {}
                        Some(_) => report.error(
                            format!("{kp}.composition[{j}].questionId"),
                            format!("question '{}' not found in stage '{}'", rule.question_id, src.id),
                        ),
                        None => report.error(
                            format!("{kp}.composition[{j}].surveyStageId"),
                            format!("stage '{}' is not a survey", src.id),
                        ),
                    }
                }
            }
        }
        StageParams::RankingElection(e) => {
            if e.mode == ElectionMode::Items {
                if e.items.len() < 2 {
                    report.error(format!("{kp}.items"), "item rankings need at least two items");
                }
                let unique: BTreeSet<_> = e.items.iter().collect();
                if unique.len() != e.items.len() {
                    report.error(format!("{kp}.items"), "duplicate item");
                }
            }
        }
        StageParams::Reveal(r) => {
            if r.sources.is_empty() {
                report.error(format!("{kp}.sources"), "reveal needs at least one source");
            }
            for (j, src) in r.sources.iter().enumerate() {
                let Some(target) = config.stage(&src.stage_id) else { continue };
                let ok = match src.show {
                    RevealView::ElectionWinner => target.kind() == StageKind::RankingElection,
                    RevealView::IndividualResponses => {
                        target.kind().is_survey() || target.kind() == StageKind::RankingElection
                    }
                };
                if !ok {
                    report.error(
                        format!("{kp}.sources[{j}].show"),
                        format!("{:?} cannot be shown for {:?} stage '{}'", src.show, target.kind(), target.id),
                    );
                }
            }
        }
        StageParams::Payout(p) => {
            if p.base_pay.minor() < 0 {
                report.error(format!("{kp}.basePay"), "must be non-negative");
            }
            for (j, item) in p.items.iter().enumerate() {
                let ip = format!("{kp}.items[{j}]");
                match item {
                    PayoutItem::FixedCompletion { amount, .. } | PayoutItem::QuizPerformance { amount, .. } => {
                        if amount.minor() < 0 {
                            report.error(format!("{ip}.amount"), "must be non-negative");
                        }
                    }
                    PayoutItem::LeaderPerformance {
                        amount,
                        election_stage_id,
                        ..
                    } => {
                        if amount.minor() < 0 {
                            report.error(format!("{ip}.amount"), "must be non-negative");
                        }
                        if let Some(StageParams::RankingElection(e)) = config.stage(election_stage_id).map(|s| &s.params) {
                            if e.mode != ElectionMode::Peers {
                                report.error(format!("{ip}.electionStageId"), "leader payouts need a peer election");
                            }
                        } else if config.stage(election_stage_id).is_some() {
                            report.error(format!("{ip}.electionStageId"), "not a RankingElection stage");
                        }
                    }
                    PayoutItem::RandomCondition { outcomes, .. } => {
                        if outcomes.is_empty() {
                            report.error(format!("{ip}.outcomes"), "needs at least one outcome");
                        }
                        let total: f64 = outcomes.iter().map(|o| o.probability).sum();
                        if outcomes.iter().any(|o| !(0.0..=1.0).contains(&o.probability) || o.amount.minor() < 0)
                            || (total - 1.0).abs() > 1e-9
                        {
                            report.error(format!("{ip}.outcomes"), "probabilities must lie in [0, 1] and sum to 1");
                        }
                    }
                }
                if let PayoutItem::QuizPerformance { survey_stage_id, .. }
                | PayoutItem::LeaderPerformance { survey_stage_id, .. } = item
                {
                    if let Some(s) = config.stage(survey_stage_id) {
                        if !s.kind().is_survey() {
                            report.error(format!("{ip}.surveyStageId"), format!("stage '{}' is not a survey", s.id));
                        }
                    }
                }
            }
        }
        StageParams::RoleAssignment(r) => {
            if r.roles.is_empty() {
                report.error(format!("{kp}.roles"), "needs at least one role");
            }
        }
        StageParams::TermsOfService | StageParams::Info => {}
    }
}

fn check_survey(s: &SurveyStageParams, comprehension: bool, kp: &str, report: &mut ValidationReport) {
    let mut ids = HashSet::new();
    if s.questions.is_empty() {
        report.error(format!("{kp}.questions"), "survey has no questions");
    }
    for (j, q) in s.questions.iter().enumerate() {
        let qp = format!("{kp}.questions[{j}]");
        if !ids.insert(&q.id) {
            report.error(format!("{qp}.id"), format!("duplicate question id '{}'", q.id));
        }
        match q.kind {
            QuestionKind::MultipleChoice | QuestionKind::Checkbox if q.options.is_empty() => {
                report.error(format!("{qp}.options"), "choice questions need options");
            }
            QuestionKind::Scale => match q.scale_bounds {
                None => report.error(format!("{qp}.scaleBounds"), "scale questions need bounds"),
                Some(b) if b.min >= b.max => {
                    report.error(format!("{qp}.scaleBounds"), format!("min {} must be below max {}", b.min, b.max))
                }
                Some(_) => {}
            },
            _ => {}
        }
        match &q.correct_answer {
            None if comprehension => {
                report.error(format!("{qp}.correctAnswer"), "comprehension questions need a correct answer");
            }
            Some(a) if !answer_fits(q, a) => {
                report.error(format!("{qp}.correctAnswer"), "correct answer does not fit the question");
            }
            _ => {}
        }
    }
}

/// Whether `answer` is a well-typed response to `q`.
pub fn answer_fits(q: &SurveyQuestion, answer: &AnswerValue) -> bool {
    let has_option = |id: &String| q.options.iter().any(|o| &o.id == id);
    match (q.kind, answer) {
        (QuestionKind::Freeform, AnswerValue::Text(_)) => true,
        (QuestionKind::MultipleChoice, AnswerValue::Choice(c)) => has_option(c),
        (QuestionKind::Checkbox, AnswerValue::Choices(cs)) => cs.iter().all(has_option),
        (QuestionKind::Scale, AnswerValue::Scale(n)) => {
            q.scale_bounds.is_some_and(|b| b.min <= *n && *n <= b.max)
        }
        _ => false,
    }
}

fn check_agents(config: &ExperimentConfig, index_of: &HashMap<&crate::ids::StageId, usize>, report: &mut ValidationReport) {
    let mut ids = HashSet::new();
    for (i, agent) in config.agent_templates.iter().enumerate() {
        let ap = format!("agentTemplates[{i}]");
        if !ids.insert(&agent.id) {
            report.error(format!("{ap}.id"), format!("duplicate agent id '{}'", agent.id));
        }
        if !(agent.wpm.is_finite() && agent.wpm > 0.0) {
            report.error(format!("{ap}.wpm"), "words per minute must be positive");
        }
        let schema = agent.effective_schema();
        let mut names = HashSet::new();
        for (j, f) in agent.structured_output_schema.iter().enumerate() {
            if !names.insert(&f.field_name) {
                report.error(format!("{ap}.structuredOutputSchema[{j}]"), format!("duplicate field '{}'", f.field_name));
            }
        }
        if let Some(gate) = &agent.response_gate {
            match schema.iter().find(|f| f.field_name == gate.field_name) {
                Some(f) if f.field_type.is_numeric() => {}
                Some(_) => report.error(format!("{ap}.responseGate.fieldName"), "gated field must be numeric"),
                None => report.error(
                    format!("{ap}.responseGate.fieldName"),
                    format!("field '{}' is not in the schema", gate.field_name),
                ),
            }
        }

        // Earliest stage this agent may run in: its first attached chat for
        // mediators, anywhere for participant agents.
        let attached_at = config
            .stages
            .iter()
            .position(|s| s.params.chat().is_some_and(|c| c.mediators.contains(&agent.id)));
        for (j, item) in agent.prompt_plan.iter().enumerate() {
            if let PromptItem::StageContextRef { stage_id } = item {
                let path = format!("{ap}.promptPlan[{j}].stageId");
                match index_of.get(stage_id) {
                    None => report.error(path, format!("unknown stage '{stage_id}'")),
                    Some(&target) => {
                        if let Some(at) = attached_at {
                            if target >= at {
                                report.error(
                                    path,
                                    format!(
                                        "context stage '{}' does not precede stage '{}' where agent '{}' runs",
                                        stage_id, config.stages[at].id, agent.id
                                    ),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}
