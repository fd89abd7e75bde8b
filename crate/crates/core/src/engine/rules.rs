//! Pure stage rules: gates, grading, per-participant expansion and answer
//! validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::state::{Cohort, ExperimentState, ParticipantRecord, ParticipantStatus};
use crate::ids::{PublicId, QuestionId};
use crate::model::answer::{AnswerContent, AnswerValue};
use crate::model::stage::{ElectionMode, ElectionStageParams, StageConfig, StageParams, SurveyStageParams};
use crate::model::validate::answer_fits;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Grade {
    pub passed: bool,
    pub per_question: BTreeMap<QuestionId, bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("missing answers for {0:?}")]
pub struct MissingAnswer(pub Vec<QuestionId>);

pub fn grade_comprehension(stage: &SurveyStageParams, answer: &AnswerContent) -> Result<Grade, MissingAnswer> {
    let empty = BTreeMap::new();
    let answers = answer.survey_answers().unwrap_or(&empty);
    let missing: Vec<QuestionId> = stage
        .questions
        .iter()
        .filter(|q| !answers.contains_key(&q.id))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MissingAnswer(missing));
    }
    let per_question: BTreeMap<QuestionId, bool> = stage
        .questions
        .iter()
        .map(|q| {
            let ok = q.correct_answer.as_ref().is_some_and(|c| answers[&q.id].matches(c));
            (q.id.clone(), ok)
        })
        .collect();
    Ok(Grade {
        passed: per_question.values().all(|&b| b),
        per_question,
    })
}

/// Number of questions answered correctly, counting only questions that
/// have an answer key.
pub fn count_correct(stage: &SurveyStageParams, answer: &AnswerContent) -> u32 {
    let Some(answers) = answer.survey_answers() else { return 0 };
    stage
        .questions
        .iter()
        .filter(|q| match (&q.correct_answer, answers.get(&q.id)) {
            (Some(c), Some(a)) => a.matches(c),
            _ => false,
        })
        .count() as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RenderedQuestion {
    pub question_id: QuestionId,
    pub subject: PublicId,
    pub subject_display_name: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cohort has no members to ask about")]
pub struct EmptyCohort;

/// Questions × subjects, question order major and publicId minor.
pub fn expand_per_participant_survey(
    stage: &SurveyStageParams,
    subjects: &[(PublicId, String)],
    viewer: &PublicId,
) -> Result<Vec<RenderedQuestion>, EmptyCohort> {
    let mut subjects: Vec<&(PublicId, String)> = subjects
        .iter()
        .filter(|(id, _)| !(stage.exclude_self && id == viewer))
        .collect();
    if subjects.is_empty() {
        return Err(EmptyCohort);
    }
    subjects.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::with_capacity(stage.questions.len() * subjects.len());
    for q in &stage.questions {
        for (id, name) in &subjects {
            out.push(RenderedQuestion {
                question_id: q.id.clone(),
                subject: id.clone(),
                subject_display_name: name.clone(),
                prompt: q.prompt.replace("{name}", name),
            });
        }
    }
    Ok(out)
}

/// Subjects of a per-participant survey: every member not booted.
pub fn survey_subjects(state: &ExperimentState, cohort: &Cohort) -> Vec<(PublicId, String)> {
    state
        .counted_members(cohort)
        .map(|p| (p.public_id.clone(), p.display_name()))
        .collect()
}

/// Whether a wait-for-all gate may open: every live member has reached the
/// stage, and at least `minParticipants` (default 1) live members exist.
pub fn wait_gate_satisfied(state: &ExperimentState, cohort: &Cohort, stage_index: usize) -> bool {
    let Some(stage) = state.stage_at(stage_index) else {
        return false;
    };
    let live: Vec<&ParticipantRecord> = state.live_members(cohort).collect();
    let needed = stage.ui.min_participants.unwrap_or(1).max(1) as usize;
    live.len() >= needed && live.iter().all(|p| p.current_stage_index >= stage_index)
}

pub fn gate_open(cohort: &Cohort, stage: &StageConfig) -> bool {
    !stage.ui.wait_for_all_participants || cohort.gates.contains_key(&stage.id)
}

/// Ranking candidates for a participant in an election stage.
pub fn election_candidates(
    state: &ExperimentState,
    cohort: &Cohort,
    params: &ElectionStageParams,
    voter: &PublicId,
) -> Vec<String> {
    match params.mode {
        ElectionMode::Items => params.items.clone(),
        ElectionMode::Peers => {
            let mut c: Vec<String> = state
                .counted_members(cohort)
                .filter(|p| params.allow_self_vote || &p.public_id != voter)
                .map(|p| p.public_id.to_string())
                .collect();
            c.sort();
            c
        }
    }
}

/// The full candidate set, for tallying.
pub fn all_candidates(state: &ExperimentState, cohort: &Cohort, params: &ElectionStageParams) -> Vec<String> {
    match params.mode {
        ElectionMode::Items => params.items.clone(),
        ElectionMode::Peers => {
            let mut c: Vec<String> = state.counted_members(cohort).map(|p| p.public_id.to_string()).collect();
            c.sort();
            c
        }
    }
}

/// Why an answer was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerProblem {
    Required,
    Invalid(String),
}

/// Checks a submission for a stage and returns what to store, if anything.
pub fn check_answer(
    state: &ExperimentState,
    cohort: &Cohort,
    participant: &ParticipantRecord,
    stage: &StageConfig,
    answer: Option<&AnswerContent>,
) -> Result<Option<AnswerContent>, AnswerProblem> {
    let invalid = |m: String| Err(AnswerProblem::Invalid(m));
    match &stage.params {
        StageParams::Info
        | StageParams::GroupChat(_)
        | StageParams::PrivateChat(_)
        | StageParams::Reveal(_)
        | StageParams::Payout(_)
        | StageParams::RoleAssignment(_)
        | StageParams::Transfer(_) => Ok(None),
        StageParams::TermsOfService => match answer {
            Some(AnswerContent::Acknowledged) => Ok(Some(AnswerContent::Acknowledged)),
            Some(_) => invalid("terms must be acknowledged".into()),
            None => Err(AnswerProblem::Required),
        },
        StageParams::Profile(p) => match (p.mode, answer) {
            (crate::model::stage::ProfileMode::AssignedPseudonym, _) => Ok(None),
            (_, Some(AnswerContent::Profile { profile })) => {
                if profile.display_name.trim().is_empty() {
                    invalid("display name is empty".into())
                } else {
                    Ok(answer.cloned())
                }
            }
            (_, Some(_)) => invalid("expected a profile".into()),
            (_, None) => Err(AnswerProblem::Required),
        },
        StageParams::Survey(s) | StageParams::Comprehension(s) => {
            let Some(a) = answer else { return Err(AnswerProblem::Required) };
            let Some(answers) = a.survey_answers() else {
                return invalid("expected survey answers".into());
            };
            for q in &s.questions {
                match answers.get(&q.id) {
                    None => return invalid(format!("question '{}' is unanswered", q.id)),
                    Some(v) if !answer_fits(q, v) => {
                        return invalid(format!("answer to '{}' does not fit the question", q.id))
                    }
                    Some(_) => {}
                }
            }
            if let Some(extra) = answers.keys().find(|k| s.question(k).is_none()) {
                return invalid(format!("unknown question '{extra}'"));
            }
            Ok(Some(a.clone()))
        }
        StageParams::SurveyPerParticipant(s) => {
            let Some(a) = answer else { return Err(AnswerProblem::Required) };
            let AnswerContent::PerParticipant { answers } = a else {
                return invalid("expected per-participant answers".into());
            };
            let subjects = survey_subjects(state, cohort);
            let items = expand_per_participant_survey(s, &subjects, &participant.public_id)
                .map_err(|e| AnswerProblem::Invalid(e.to_string()))?;
            let given: BTreeMap<(QuestionId, PublicId), &AnswerValue> = answers
                .iter()
                .map(|a| ((a.question_id.clone(), a.subject.clone()), &a.value))
                .collect();
            for item in &items {
                let q = s.question(&item.question_id).expect("expanded from stage");
                match given.get(&(item.question_id.clone(), item.subject.clone())) {
                    None => {
                        return invalid(format!("question '{}' about {} is unanswered", item.question_id, item.subject))
                    }
                    Some(v) if !answer_fits(q, v) => {
                        return invalid(format!("answer to '{}' about {} does not fit", item.question_id, item.subject))
                    }
                    Some(_) => {}
                }
            }
            Ok(Some(a.clone()))
        }
        StageParams::RankingElection(e) => {
            let Some(a) = answer else { return Err(AnswerProblem::Required) };
            let AnswerContent::Ranking { ranking } = a else {
                return invalid("expected a ranking".into());
            };
            let want: BTreeSet<String> = election_candidates(state, cohort, e, &participant.public_id)
                .into_iter()
                .collect();
            let got: BTreeSet<String> = ranking.iter().cloned().collect();
            if got.len() != ranking.len() || got != want {
                return invalid("ranking must list every candidate exactly once".into());
            }
            Ok(Some(a.clone()))
        }
    }
}

/// Stages an agent participant answers with a provider call.
pub fn needs_agent_call(stage: &StageConfig) -> bool {
    matches!(
        stage.params,
        StageParams::Survey(_) | StageParams::Comprehension(_) | StageParams::RankingElection(_)
    )
}

pub fn is_live(p: &ParticipantRecord) -> bool {
    !p.status.is_terminal()
}

pub fn is_booted(p: &ParticipantRecord) -> bool {
    p.status == ParticipantStatus::Booted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stage::{ChoiceOption, QuestionKind, SurveyQuestion};

    fn mc(id: &str, correct: &str) -> SurveyQuestion {
        SurveyQuestion {
            id: id.into(),
            kind: QuestionKind::MultipleChoice,
            prompt: format!("{id}?"),
            options: vec![
                ChoiceOption {
                    id: "a".into(),
                    text: "A".into(),
                },
                ChoiceOption {
                    id: "b".into(),
                    text: "B".into(),
                },
            ],
            scale_bounds: None,
            correct_answer: Some(AnswerValue::Choice(correct.into())),
        }
    }

    fn survey(answers: &[(&str, &str)]) -> AnswerContent {
        AnswerContent::Survey {
            answers: answers
                .iter()
                .map(|(q, a)| (QuestionId::from(*q), AnswerValue::Choice(a.to_string())))
                .collect(),
        }
    }

    #[test]
    fn grading() {
        let s = SurveyStageParams {
            questions: vec![mc("q1", "a"), mc("q2", "b"), mc("q3", "a")],
            exclude_self: false,
        };
        let g = grade_comprehension(&s, &survey(&[("q1", "a"), ("q2", "b"), ("q3", "a")])).unwrap();
        assert!(g.passed);
        let g = grade_comprehension(&s, &survey(&[("q1", "a"), ("q2", "a"), ("q3", "a")])).unwrap();
        assert!(!g.passed);
        assert_eq!(g.per_question.iter().filter(|(_, ok)| !**ok).count(), 1);
        assert!(!g.per_question[&QuestionId::from("q2")]);
        let e = grade_comprehension(&s, &survey(&[("q1", "a")])).unwrap_err();
        assert_eq!(e.0, vec![QuestionId::from("q2"), QuestionId::from("q3")]);
    }

    #[test]
    fn expansion_order_and_self() {
        let s = SurveyStageParams {
            questions: vec![mc("q1", "a"), mc("q2", "a")],
            exclude_self: false,
        };
        let subjects: Vec<(PublicId, String)> = ["p-d", "p-b", "p-a", "p-c"]
            .iter()
            .map(|id| (PublicId::from(*id), id.to_uppercase()))
            .collect();
        let items = expand_per_participant_survey(&s, &subjects, &"p-a".into()).unwrap();
        assert_eq!(items.len(), 8);
        let order: Vec<(String, String)> = items
            .iter()
            .map(|i| (i.question_id.to_string(), i.subject.to_string()))
            .collect();
        assert_eq!(order[0], ("q1".into(), "p-a".into()));
        assert_eq!(order[3], ("q1".into(), "p-d".into()));
        assert_eq!(order[4], ("q2".into(), "p-a".into()));

        let solo = vec![(PublicId::from("p-a"), "A".to_string())];
        assert_eq!(expand_per_participant_survey(&s, &solo, &"p-a".into()).unwrap().len(), 2);
        let excl = SurveyStageParams {
            exclude_self: true,
            ..s.clone()
        };
        assert_eq!(expand_per_participant_survey(&excl, &solo, &"p-a".into()), Err(EmptyCohort));
    }
}
