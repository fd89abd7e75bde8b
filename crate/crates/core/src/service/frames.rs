//! Stream topics and the projection of log records onto them.
//!
//! Participant-facing payloads are built field by field rather than by
//! forwarding events, so nothing private rides along by accident.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::event::{Event, EventRecord, OfferState};
use crate::engine::state::ExperimentState;
use crate::engine::split_chat_key;
use crate::ids::{CohortId, ExperimentId, PrivateIdDigest, PublicId};
use crate::store::export::REDACTED;

use super::auth::Session;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "topic", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Topic {
    /// Chat, gates, presence and progress of one cohort.
    CohortPublic {
        experiment_id: ExperimentId,
        cohort_id: CohortId,
    },
    /// Offers, attention checks and facilitator messages for one person.
    ParticipantPrivate {
        experiment_id: ExperimentId,
        public_id: PublicId,
    },
    /// Full records, call logs and alerts for experimenters.
    ExperimenterDebug { experiment_id: ExperimentId },
}

impl Topic {
    pub fn experiment_id(&self) -> &ExperimentId {
        match self {
            Topic::CohortPublic { experiment_id, .. }
            | Topic::ParticipantPrivate { experiment_id, .. }
            | Topic::ExperimenterDebug { experiment_id } => experiment_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(flatten)]
    pub topic: Topic,
    /// Sequence of the source record in its cohort stream; clients dedupe on
    /// (topic, sequence).
    pub sequence: u64,
    pub payload: Value,
}

/// What a session has asked to receive. Participants always get their own
/// cohort and private topics; anything else is checked by
/// [`participant_may_subscribe`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Subscription {
    Topic(Topic),
    /// Everything the given participant would receive.
    Mirror {
        experiment_id: ExperimentId,
        public_id: PublicId,
    },
}

/// Whether a participant session would receive `frame`. Cohort membership is
/// evaluated at delivery time, so a transferred participant follows their
/// new cohort.
pub fn participant_receives(state: &ExperimentState, experiment: &ExperimentId, me: &PublicId, frame: &Frame) -> bool {
    if frame.topic.experiment_id() != experiment {
        return false;
    }
    match &frame.topic {
        Topic::CohortPublic { cohort_id, .. } => state.participants.get(me).is_some_and(|p| &p.cohort_id == cohort_id),
        Topic::ParticipantPrivate { public_id, .. } => public_id == me,
        Topic::ExperimenterDebug { .. } => false,
    }
}

/// The full record as experimenters see it, with the join-secret digest
/// removed.
pub fn debug_record(rec: &EventRecord) -> Value {
    let mut rec = rec.clone();
    if let Event::ParticipantCreated { private_id_digest, .. } = &mut rec.event {
        *private_id_digest = PrivateIdDigest(REDACTED.to_string());
    }
    serde_json::to_value(&rec).unwrap_or(Value::Null)
}

/// Frames for one record, given the state after applying it.
pub fn project(state: &ExperimentState, experiment: &ExperimentId, rec: &EventRecord) -> Vec<Frame> {
    let mut out = Vec::new();
    let seq = rec.sequence;
    let cohort_frame = |cohort: &CohortId, payload: Value| Frame {
        topic: Topic::CohortPublic {
            experiment_id: experiment.clone(),
            cohort_id: cohort.clone(),
        },
        sequence: seq,
        payload,
    };
    let private_frame = |who: &PublicId, payload: Value| Frame {
        topic: Topic::ParticipantPrivate {
            experiment_id: experiment.clone(),
            public_id: who.clone(),
        },
        sequence: seq,
        payload,
    };
    let cohort = rec.cohort_id.as_ref();
    let at = rec.timestamp;

    match &rec.event {
        Event::ChatMessagePosted { stage_id, message } | Event::AgentDraftDelivered { stage_id, message } => {
            let payload = json!({"kind": "chatMessage", "chat": stage_id, "message": message});
            match split_chat_key(stage_id) {
                (_, Some(owner)) => out.push(private_frame(&owner, payload)),
                (_, None) => out.extend(cohort.map(|c| cohort_frame(c, payload))),
            }
        }
        Event::AgentRoundResolved {
            stage_id,
            winner: Some(w),
            ..
        } => {
            let name = state
                .participants
                .get(&PublicId::from(w.agent_id.as_str()))
                .map(|p| p.display_name())
                .or_else(|| state.config.agent(&w.agent_id).map(|a| a.profile.display_name.clone()))
                .unwrap_or_default();
            let payload = json!({"kind": "typing", "chat": stage_id, "displayName": name, "until": w.deliver_at});
            match split_chat_key(stage_id) {
                (_, Some(owner)) => out.push(private_frame(&owner, payload)),
                (_, None) => out.extend(cohort.map(|c| cohort_frame(c, payload))),
            }
        }
        Event::AgentDraftDropped { stage_id, .. } => {
            let payload = json!({"kind": "typingStopped", "chat": stage_id});
            match split_chat_key(stage_id) {
                (_, Some(owner)) => out.push(private_frame(&owner, payload)),
                (_, None) => out.extend(cohort.map(|c| cohort_frame(c, payload))),
            }
        }
        Event::EndChatVoted { stage_id, public_id } => {
            let payload = json!({"kind": "endChatVote", "chat": stage_id, "publicId": public_id});
            out.extend(cohort.map(|c| cohort_frame(c, payload)));
        }
        Event::ChatEnded { stage_id } => {
            let payload = json!({"kind": "chatEnded", "chat": stage_id});
            match split_chat_key(stage_id) {
                (_, Some(owner)) => out.push(private_frame(&owner, payload)),
                (_, None) => out.extend(cohort.map(|c| cohort_frame(c, payload))),
            }
        }
        Event::GateOpened { stage_id } => {
            out.extend(cohort.map(|c| cohort_frame(c, json!({"kind": "gateOpened", "stageId": stage_id, "at": at}))));
        }
        Event::ParticipantJoined { public_id }
        | Event::ParticipantBooted { public_id }
        | Event::ParticipantCompleted { public_id, .. } => {
            if let Some(p) = state.participants.get(public_id) {
                let payload = json!({
                    "kind": "memberStatus",
                    "publicId": public_id,
                    "status": p.status.as_str(),
                    "stageIndex": p.current_stage_index,
                });
                out.extend(cohort.map(|c| cohort_frame(c, payload)));
                if let Event::ParticipantCompleted { redirect_url, .. } = &rec.event {
                    out.push(private_frame(public_id, json!({"kind": "completed", "redirectUrl": redirect_url})));
                }
            }
        }
        Event::ProfileSet { public_id, profile, .. } => {
            let payload = json!({"kind": "profile", "publicId": public_id, "profile": profile});
            out.extend(cohort.map(|c| cohort_frame(c, payload)));
        }
        Event::Advanced { public_id, to, timed_out, .. } => {
            let payload = json!({"kind": "progress", "publicId": public_id, "stageIndex": to, "timedOut": timed_out});
            out.extend(cohort.map(|c| cohort_frame(c, payload)));
        }
        Event::AnswerSubmitted { public_id, answer } => {
            out.push(private_frame(public_id, json!({"kind": "answerStored", "answer": answer})));
        }
        Event::DraftSaved { public_id, stage_id, .. } => {
            out.push(private_frame(public_id, json!({"kind": "draftSaved", "stageId": stage_id})));
        }
        Event::ComprehensionFailed {
            public_id,
            stage_id,
            attempt,
            per_question,
        } => {
            let payload = json!({"kind": "comprehensionFailed", "stageId": stage_id, "attempt": attempt, "perQuestion": per_question});
            out.push(private_frame(public_id, payload));
        }
        Event::RoleAssigned { stage_id, public_id, role } => {
            out.push(private_frame(public_id, json!({"kind": "role", "stageId": stage_id, "role": role})));
        }
        Event::ElectionTallied { stage_id, result, complete } => {
            let payload = json!({"kind": "election", "stageId": stage_id, "result": result, "complete": complete});
            out.extend(cohort.map(|c| cohort_frame(c, payload)));
        }
        Event::RevealBuilt { snapshot } => {
            out.extend(cohort.map(|c| cohort_frame(c, json!({"kind": "reveal", "snapshot": snapshot}))));
        }
        Event::PayoutComputed { public_id, row } => {
            let mut row = row.clone();
            row.external_id = None;
            out.push(private_frame(public_id, json!({"kind": "payout", "row": row})));
        }
        Event::TransferOffered { offer } => {
            let payload = json!({
                "kind": "transferOffer",
                "offerId": offer.id,
                "expiresAt": offer.expires_at,
            });
            out.push(private_frame(&offer.participant_public_id, payload));
        }
        Event::TransferResolved { offer_id, state: s } => {
            if let Some(offer) = state.offers.get(offer_id) {
                let payload = json!({"kind": "transferResolved", "offerId": offer_id, "state": s});
                out.push(private_frame(&offer.participant_public_id, payload));
                if *s == OfferState::Accepted {
                    let payload = json!({"kind": "memberJoined", "publicId": offer.participant_public_id});
                    out.push(cohort_frame(&offer.to_cohort_id, payload.clone()));
                    let payload = json!({"kind": "memberLeft", "publicId": offer.participant_public_id});
                    out.push(cohort_frame(&offer.from_cohort_id, payload));
                }
            }
        }
        Event::LobbyMatched { from, to, members } => {
            for m in members {
                out.push(private_frame(m, json!({"kind": "matched", "cohortId": to})));
                out.push(cohort_frame(from, json!({"kind": "memberLeft", "publicId": m})));
            }
        }
        Event::AttentionCheckSent { check } => {
            let payload = json!({
                "kind": "attentionCheck",
                "checkId": check.id,
                "deadline": check.deadline(),
            });
            out.push(private_frame(&check.participant_public_id, payload));
        }
        Event::AttentionCheckResolved { check_id, state: s } => {
            if let Some(c) = state.attention_checks.get(check_id) {
                let payload = json!({"kind": "attentionCheckResolved", "checkId": check_id, "state": s});
                out.push(private_frame(&c.participant_public_id, payload));
            }
        }
        Event::AlertResolved { alert_id, response } => {
            if let Some(a) = state.alerts.get(alert_id) {
                let payload = json!({"kind": "alertResolved", "alertId": alert_id, "response": response});
                out.push(private_frame(&a.participant_public_id, payload));
            }
        }
        Event::FacilitatorMessage { public_id, text } => {
            out.push(private_frame(public_id, json!({"kind": "facilitatorMessage", "text": text, "at": at})));
        }
        _ => {}
    }

    out.push(Frame {
        topic: Topic::ExperimenterDebug {
            experiment_id: experiment.clone(),
        },
        sequence: seq,
        payload: debug_record(rec),
    });
    out
}

/// Whether `session` may be sent frames of `topic`, ignoring role checks
/// (done by the hub, which knows the experiment roles).
pub fn participant_may_subscribe(session: &Session, topic: &Topic, state: &ExperimentState) -> bool {
    match session {
        Session::Experimenter { .. } => true,
        Session::Participant {
            experiment_id,
            public_id,
        } => {
            if topic.experiment_id() != experiment_id {
                return false;
            }
            match topic {
                Topic::CohortPublic { cohort_id, .. } => state.participants.get(public_id).is_some_and(|p| &p.cohort_id == cohort_id),
                Topic::ParticipantPrivate { public_id: who, .. } => who == public_id,
                Topic::ExperimenterDebug { .. } => false,
            }
        }
    }
}
