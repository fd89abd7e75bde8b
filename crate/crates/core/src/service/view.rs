//! Read models: the participant view, participant search and the
//! facilitator dashboard.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::chat::ChatMessage;
use crate::engine::event::{OfferState, TransferOffer};
use crate::engine::rules::{election_candidates, expand_per_participant_survey, survey_subjects, RenderedQuestion};
use crate::engine::state::{ExperimentState, ParticipantStatus};
use crate::engine::{chat_key, Engine};
use crate::ids::{CohortId, PublicId, StageId};
use crate::model::answer::{AnswerContent, AnswerRecord, Profile};
use crate::model::stage::{StageConfig, StageKind, StageParams};
use crate::presence::{AttentionCheck, PresenceState};
use crate::tally::{ElectionResult, PayoutRow, RevealSnapshot};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StageSummary {
    pub id: StageId,
    pub title: String,
    pub kind: StageKind,
    /// Full config for current and past stages only; answer keys removed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<StageConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MemberView {
    pub public_id: PublicId,
    pub display_name: String,
    pub avatar: String,
    pub status: ParticipantStatus,
    pub stage_index: usize,
    pub is_agent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatView {
    pub chat: StageId,
    pub messages: Vec<ChatMessage>,
    pub ended: bool,
    pub end_votes: Vec<PublicId>,
    /// Display name of the agent currently "typing", if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub typing: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct OfferView {
    pub offer_id: String,
    pub to_cohort_id: CohortId,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckView {
    pub check_id: String,
    pub deadline: Timestamp,
}

/// Everything a participant's screen needs. Built only from the viewer's own
/// record and cohort-public data.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ParticipantView {
    pub public_id: PublicId,
    pub cohort_id: CohortId,
    pub status: ParticipantStatus,
    pub current_stage_index: usize,
    pub profile: Option<Profile>,
    pub stages: Vec<StageSummary>,
    pub answers: BTreeMap<StageId, AnswerRecord>,
    pub drafts: BTreeMap<StageId, AnswerContent>,
    pub roles: BTreeMap<StageId, String>,
    pub members: Vec<MemberView>,
    pub chats: Vec<ChatView>,
    pub gates_open: Vec<StageId>,
    pub elections: BTreeMap<StageId, ElectionResult>,
    pub reveals: BTreeMap<StageId, RevealSnapshot>,
    /// Candidates the viewer may rank at the current stage.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rendered_questions: Vec<RenderedQuestion>,
    pub pending_offer: Option<OfferView>,
    pub pending_check: Option<CheckView>,
    pub facilitator_messages: Vec<(Timestamp, String)>,
    pub payout: Option<PayoutRow>,
    pub redirect_url: Option<String>,
}

/// A stage config with answer keys stripped.
pub fn public_stage(stage: &StageConfig) -> StageConfig {
    let mut s = stage.clone();
    match &mut s.params {
        StageParams::Survey(p) | StageParams::SurveyPerParticipant(p) | StageParams::Comprehension(p) => {
            for q in &mut p.questions {
                q.correct_answer = None;
            }
        }
        StageParams::Transfer(t) => t.composition.clear(),
        _ => {}
    }
    s
}

pub fn participant_view(state: &ExperimentState, me: &PublicId) -> Option<ParticipantView> {
    let p = state.participants.get(me)?;
    let cohort = state.cohorts.get(&p.cohort_id)?;
    let idx = p.current_stage_index;

    let stages = state
        .stages()
        .iter()
        .enumerate()
        .map(|(i, s)| StageSummary {
            id: s.id.clone(),
            title: s.title.clone(),
            kind: s.kind(),
            config: (i <= idx).then(|| public_stage(s)),
        })
        .collect();

    let members = state
        .members(cohort)
        .map(|m| MemberView {
            public_id: m.public_id.clone(),
            display_name: m.display_name(),
            avatar: m.profile.as_ref().map(|pr| pr.avatar.clone()).unwrap_or_default(),
            status: m.status,
            stage_index: m.current_stage_index,
            is_agent: m.is_agent(),
        })
        .collect();

    let mut chats = Vec::new();
    for (i, s) in state.stages().iter().enumerate() {
        if i > idx || !s.kind().is_chat() {
            continue;
        }
        let key = chat_key(s, me);
        if let Some(ch) = cohort.chats.get(&key) {
            let typing = match &ch.slot {
                crate::engine::Slot::Typing { schedule, .. } => Some(
                    state
                        .participants
                        .get(&PublicId::from(schedule.agent_id.as_str()))
                        .map(|a| a.display_name())
                        .or_else(|| state.config.agent(&schedule.agent_id).map(|a| a.profile.display_name.clone()))
                        .unwrap_or_default(),
                ),
                _ => None,
            };
            chats.push(ChatView {
                chat: key,
                messages: ch.messages.clone(),
                ended: ch.ended,
                end_votes: ch.end_votes.iter().cloned().collect(),
                typing,
            });
        }
    }

    let reached = |id: &StageId| state.config.stage_index(id).is_some_and(|i| i <= idx);
    let elections = cohort
        .elections
        .iter()
        .filter(|(id, _)| reached(id))
        .map(|(id, e)| (id.clone(), e.result.clone()))
        .collect();
    let reveals = cohort
        .reveals
        .iter()
        .filter(|(id, _)| reached(id))
        .map(|(id, r)| (id.clone(), r.clone()))
        .collect();

    let current = state.stage_at(idx);
    // Member-derived content stays hidden while the stage's gate is closed.
    let gated = current.is_some_and(|s| s.ui.wait_for_all_participants && !cohort.gates.contains_key(&s.id));
    let candidates = match current.filter(|_| !gated).map(|s| &s.params) {
        Some(StageParams::RankingElection(e)) => election_candidates(state, cohort, e, me),
        _ => Vec::new(),
    };
    let rendered_questions = match current.filter(|_| !gated).map(|s| &s.params) {
        Some(StageParams::SurveyPerParticipant(sp)) => {
            expand_per_participant_survey(sp, &survey_subjects(state, cohort), me).unwrap_or_default()
        }
        _ => Vec::new(),
    };

    let pending_offer = state.pending_offer_for(me).map(|o: &TransferOffer| OfferView {
        offer_id: o.id.clone(),
        to_cohort_id: o.to_cohort_id.clone(),
        expires_at: o.expires_at,
    });
    let pending_check = state.pending_check_for(me).map(|c: &AttentionCheck| CheckView {
        check_id: c.id.clone(),
        deadline: c.deadline(),
    });
    let facilitator_messages = state
        .facilitator_messages
        .iter()
        .filter(|m| &m.public_id == me)
        .map(|m| (m.sent_at, m.text.clone()))
        .collect();
    let payout = state.payouts.get(me).map(|r| {
        let mut r = r.clone();
        r.external_id = None;
        r
    });
    let redirect_url = (p.status == ParticipantStatus::Completed)
        .then(|| state.config.metadata.prolific_redirect_url.clone())
        .flatten();

    Some(ParticipantView {
        public_id: me.clone(),
        cohort_id: p.cohort_id.clone(),
        status: p.status,
        current_stage_index: idx,
        profile: p.profile.clone(),
        stages,
        answers: p.stage_answers.clone(),
        drafts: p.drafts.clone(),
        roles: p.roles.clone(),
        members,
        chats,
        gates_open: cohort.gates.keys().cloned().collect(),
        elections,
        reveals,
        candidates,
        rendered_questions,
        pending_offer,
        pending_check,
        facilitator_messages,
        payout,
        redirect_url,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SearchHit {
    pub public_id: PublicId,
    pub external_id: Option<String>,
    pub display_name: String,
    pub cohort_id: CohortId,
    pub stage_index: usize,
    pub status: ParticipantStatus,
}

/// Case-insensitive substring match on display name (pseudonyms included),
/// publicId and externalId.
pub fn search_participants(state: &ExperimentState, query: &str) -> Vec<SearchHit> {
    let q = query.trim().to_lowercase();
    if q.is_empty() {
        return Vec::new();
    }
    state
        .participants
        .values()
        .filter(|p| {
            p.display_name().to_lowercase().contains(&q)
                || p.public_id.as_str().to_lowercase().contains(&q)
                || p.external_id.as_ref().is_some_and(|e| e.to_lowercase().contains(&q))
        })
        .map(|p| SearchHit {
            public_id: p.public_id.clone(),
            external_id: p.external_id.clone(),
            display_name: p.display_name(),
            cohort_id: p.cohort_id.clone(),
            stage_index: p.current_stage_index,
            status: p.status,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CohortPanel {
    pub cohort_id: CohortId,
    pub name: String,
    pub locked: bool,
    pub members: Vec<PresenceState>,
    pub pending_offers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Dashboard {
    pub cohorts: Vec<CohortPanel>,
    pub open_alerts: Vec<crate::presence::Alert>,
    pub attention: crate::presence::AttentionStats,
}

pub fn dashboard(engine: &Engine, now: Timestamp) -> Dashboard {
    let state = engine.state();
    let cohorts = state
        .cohorts
        .values()
        .map(|c| CohortPanel {
            cohort_id: c.id.clone(),
            name: c.name.clone(),
            locked: c.locked,
            members: engine.presence_states(&c.id, now),
            pending_offers: state
                .offers
                .values()
                .filter(|o| o.to_cohort_id == c.id && o.state == OfferState::Pending)
                .count(),
        })
        .collect();
    Dashboard {
        cohorts,
        open_alerts: state.alerts.values().filter(|a| a.resolved_at.is_none()).cloned().collect(),
        attention: state.attention_stats(),
    }
}
