//! Read adapters from experiment state to the tally inputs and agent
//! prompt context.

use std::collections::BTreeMap;

use crate::agent::prompt::StageContext;
use crate::engine::rules::{all_candidates, count_correct};
use crate::engine::state::{Cohort, ExperimentState, ParticipantRecord, ParticipantStatus};
use crate::ids::{CohortId, PublicId, StageId};
use crate::model::answer::AnswerContent;
use crate::model::stage::StageParams;
use crate::tally::reveal::ResponseRow;
use crate::tally::{Ballot, PayoutData, RevealData};

/// Rankings of counted members, in member order, restricted to the current
/// candidates (a booted peer drops out of earlier ballots). Empty rankings
/// are skipped.
pub fn ballots(state: &ExperimentState, cohort: &Cohort, stage: &StageId, candidates: &[String]) -> Vec<Ballot> {
    state
        .counted_members(cohort)
        .filter_map(|p| match p.stage_answers.get(stage).map(|a| &a.content) {
            Some(AnswerContent::Ranking { ranking }) => {
                let ranking: Vec<String> = ranking.iter().filter(|c| candidates.contains(c)).cloned().collect();
                (!ranking.is_empty()).then(|| Ballot {
                    voter_public_id: p.public_id.clone(),
                    ranking,
                })
            }
            _ => None,
        })
        .collect()
}

/// Every counted member has an answer for the stage.
pub fn stage_complete(state: &ExperimentState, cohort: &Cohort, stage: &StageId) -> bool {
    let mut any = false;
    for p in state.counted_members(cohort) {
        any = true;
        if !p.stage_answers.contains_key(stage) {
            return false;
        }
    }
    any
}

pub struct PayoutView<'a> {
    pub state: &'a ExperimentState,
    pub cohort: &'a Cohort,
    pub participant: &'a ParticipantRecord,
}

impl PayoutData for PayoutView<'_> {
    fn public_id(&self) -> &PublicId {
        &self.participant.public_id
    }

    fn cohort_id(&self) -> &CohortId {
        &self.cohort.id
    }

    fn completed_stage(&self, stage: &StageId) -> bool {
        match self.state.config.stage_index(stage) {
            Some(i) => self.participant.current_stage_index > i,
            None => false,
        }
    }

    fn correct_answers(&self, member: &str, survey: &StageId) -> Option<u32> {
        let p = self.state.participants.get(&PublicId::from(member))?;
        let answer = p.stage_answers.get(survey)?;
        let params = self.state.config.stage(survey)?.params.survey()?;
        Some(count_correct(params, &answer.content))
    }

    fn election_winner(&self, election: &StageId) -> Option<String> {
        self.cohort
            .elections
            .get(election)
            .filter(|e| e.complete)
            .map(|e| e.result.winner.clone())
    }

    fn member_can_answer(&self, member: &str) -> bool {
        self.state
            .participants
            .get(&PublicId::from(member))
            .is_some_and(|p| p.status != ParticipantStatus::Booted)
    }
}

pub struct RevealView<'a> {
    pub state: &'a ExperimentState,
    pub cohort: &'a Cohort,
}

impl RevealData for RevealView<'_> {
    fn source_complete(&self, stage: &StageId) -> bool {
        stage_complete(self.state, self.cohort, stage)
    }

    fn ballots(&self, stage: &StageId) -> (Vec<Ballot>, Vec<String>) {
        let candidates = match self.state.config.stage(stage).map(|s| &s.params) {
            Some(StageParams::RankingElection(e)) => all_candidates(self.state, self.cohort, e),
            _ => Vec::new(),
        };
        (ballots(self.state, self.cohort, stage, &candidates), candidates)
    }

    fn responses(&self, stage: &StageId) -> Vec<ResponseRow> {
        let mut members: Vec<&ParticipantRecord> = self.state.counted_members(self.cohort).collect();
        members.sort_by(|a, b| a.public_id.cmp(&b.public_id));
        let mut rows = Vec::new();
        for p in members {
            let Some(a) = p.stage_answers.get(stage) else { continue };
            for (question_id, answer) in answer_cells(&a.content) {
                rows.push(ResponseRow {
                    public_id: p.public_id.clone(),
                    display_name: p.display_name(),
                    question_id,
                    answer,
                });
            }
        }
        rows
    }

    fn display_name(&self, candidate: &str) -> String {
        match self.state.participants.get(&PublicId::from(candidate)) {
            Some(p) => p.display_name(),
            None => candidate.to_string(),
        }
    }
}

/// (question, answer) cells of an answer in a stable order. Per-participant
/// answers use `question/subject` as the question key.
pub fn answer_cells(content: &AnswerContent) -> Vec<(String, String)> {
    match content {
        AnswerContent::Acknowledged => Vec::new(),
        AnswerContent::Profile { profile } => vec![("displayName".to_string(), profile.display_name.clone())],
        AnswerContent::Survey { answers } => answers.iter().map(|(q, v)| (q.to_string(), v.key())).collect(),
        AnswerContent::PerParticipant { answers } => {
            let mut cells: Vec<(String, String)> = answers
                .iter()
                .map(|a| (format!("{}/{}", a.question_id, a.subject), a.value.key()))
                .collect();
            cells.sort();
            cells
        }
        AnswerContent::Ranking { ranking } => vec![("ranking".to_string(), ranking.join(";"))],
    }
}

/// Context lines for the stages an agent was granted. Only cohort-level
/// data of the named stages is included.
pub fn stage_context(
    state: &ExperimentState,
    cohort: &Cohort,
    stages: &[StageId],
) -> BTreeMap<StageId, StageContext> {
    let mut out = BTreeMap::new();
    for id in stages {
        let Some(stage) = state.config.stage(id) else { continue };
        let mut lines = Vec::new();
        match &stage.params {
            StageParams::Survey(_) | StageParams::Comprehension(_) | StageParams::SurveyPerParticipant(_) => {
                for p in state.counted_members(cohort) {
                    if let Some(a) = p.stage_answers.get(id) {
                        for (q, v) in answer_cells(&a.content) {
                            lines.push(format!("{}: {} = {}", p.display_name(), q, v));
                        }
                    }
                }
            }
            StageParams::RankingElection(_) => {
                if let Some(e) = cohort.elections.get(id) {
                    let view = RevealView { state, cohort };
                    lines.push(format!("Current winner: {}", view.display_name(&e.result.winner)));
                }
            }
            StageParams::GroupChat(_) => {
                if let Some(chat) = cohort.chats.get(id) {
                    lines.extend(chat.messages.iter().map(|m| m.history_line()));
                }
            }
            StageParams::Profile(_) => {
                for p in state.counted_members(cohort) {
                    lines.push(p.display_name());
                }
            }
            _ => {}
        }
        out.insert(
            id.clone(),
            StageContext {
                title: stage.title.clone(),
                lines,
            },
        );
    }
    out
}
