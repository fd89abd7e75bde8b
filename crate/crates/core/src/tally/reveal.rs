use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{PublicId, StageId};
use crate::model::stage::{RevealStageParams, RevealView};
use crate::tally::election::{Ballot, Tally, TallyError};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResponseRow {
    pub public_id: PublicId,
    pub display_name: String,
    pub question_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum RevealSection {
    ElectionWinner {
        source: StageId,
        winner: String,
        winner_display_name: String,
        /// Copeland score per candidate; voter identities are not included.
        scores: BTreeMap<String, i32>,
        ballots_counted: u32,
        tie_break_applied: bool,
    },
    IndividualResponses { source: StageId, rows: Vec<ResponseRow> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RevealSnapshot {
    pub stage_id: StageId,
    pub built_at: Timestamp,
    pub sections: Vec<RevealSection>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RevealError {
    #[error("source stage '{0}' is not complete for this cohort")]
    SourceIncomplete(StageId),
    #[error("election in stage '{stage}': {source}")]
    Election { stage: StageId, source: TallyError },
}

/// What a reveal reads from its cohort.
pub trait RevealData {
    fn source_complete(&self, stage: &StageId) -> bool;
    /// Ballots of counted voters and the candidate set.
    fn ballots(&self, stage: &StageId) -> (Vec<Ballot>, Vec<String>);
    /// Answer cells in (publicId, questionId) order.
    fn responses(&self, stage: &StageId) -> Vec<ResponseRow>;
    fn display_name(&self, candidate: &str) -> String;
}

pub fn build_reveal(
    stage_id: &StageId,
    params: &RevealStageParams,
    data: &dyn RevealData,
    now: Timestamp,
) -> Result<RevealSnapshot, RevealError> {
    if let Some(src) = params.sources.iter().find(|s| !data.source_complete(&s.stage_id)) {
        return Err(RevealError::SourceIncomplete(src.stage_id.clone()));
    }
    let mut sections = Vec::with_capacity(params.sources.len());
    for src in &params.sources {
        sections.push(match src.show {
            RevealView::ElectionWinner => {
                let (ballots, candidates) = data.ballots(&src.stage_id);
                let mut tally = Tally::new(candidates);
                let wrap = |e| RevealError::Election {
                    stage: src.stage_id.clone(),
                    source: e,
                };
                for b in &ballots {
                    tally.add(b).map_err(wrap)?;
                }
                let r = tally.result().map_err(wrap)?;
                RevealSection::ElectionWinner {
                    source: src.stage_id.clone(),
                    winner_display_name: data.display_name(&r.winner),
                    winner: r.winner,
                    scores: r.copeland_scores,
                    ballots_counted: r.ballots_counted,
                    tie_break_applied: r.tie_break_applied,
                }
            }
            RevealView::IndividualResponses => RevealSection::IndividualResponses {
                source: src.stage_id.clone(),
                rows: data.responses(&src.stage_id),
            },
        });
    }
    Ok(RevealSnapshot {
        stage_id: stage_id.clone(),
        built_at: now,
        sections,
    })
}
