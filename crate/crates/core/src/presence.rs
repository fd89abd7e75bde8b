//! Liveness tracking, facilitation status flags, attention checks and alerts.
//!
//! Heartbeats bypass the cohort event stream: they land in a last-write-wins
//! [`PresenceStore`] and status flags are derived on read.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ids::PublicId;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PresenceSettings {
    pub heartbeat_interval_seconds: u32,
    pub missed_beats_before_disconnect: u32,
    pub idle_threshold_seconds: u32,
    pub lagging_margin: u32,
}

impl Default for PresenceSettings {
    fn default() -> Self {
        PresenceSettings {
            heartbeat_interval_seconds: 15,
            missed_beats_before_disconnect: 2,
            idle_threshold_seconds: 60,
            lagging_margin: 1,
        }
    }
}

impl PresenceSettings {
    pub fn disconnect_after_ms(&self) -> i64 {
        i64::from(self.heartbeat_interval_seconds) * i64::from(self.missed_beats_before_disconnect) * 1000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Connection {
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Activity {
    Active,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StatusFlag {
    OnTrack,
    Lagging,
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PresenceState {
    pub participant_public_id: PublicId,
    pub last_heartbeat_at: Timestamp,
    pub last_active_at: Timestamp,
    pub connection: Connection,
    pub activity: Activity,
    pub status_flag: StatusFlag,
}

/// Raw heartbeat record; everything else is derived from it and the clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Beat {
    last_heartbeat_at: Timestamp,
    last_active_at: Timestamp,
}

#[derive(Debug, Clone, Default)]
pub struct PresenceStore {
    beats: HashMap<PublicId, Beat>,
}

impl PresenceStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Last-write-wins per participant. `active` reports user interaction
    /// since the previous beat.
    pub fn record(&mut self, id: &PublicId, now: Timestamp, active: bool) {
        let entry = self.beats.entry(id.clone()).or_insert(Beat {
            last_heartbeat_at: now,
            last_active_at: now,
        });
        if now >= entry.last_heartbeat_at {
            entry.last_heartbeat_at = now;
        }
        if active && now >= entry.last_active_at {
            entry.last_active_at = now;
        }
    }

    pub fn forget(&mut self, id: &PublicId) {
        self.beats.remove(id);
    }

    pub fn contains(&self, id: &PublicId) -> bool {
        self.beats.contains_key(id)
    }

    pub fn connection(&self, id: &PublicId, now: Timestamp, settings: &PresenceSettings) -> Connection {
        match self.beats.get(id) {
            Some(b) if now.millis_since(b.last_heartbeat_at) < settings.disconnect_after_ms() => {
                Connection::Connected
            }
            _ => Connection::Disconnected,
        }
    }

    /// Presence plus derived status for one member, given the stage indices
    /// of the non-terminal cohort members (including this one).
    pub fn state(
        &self,
        id: &PublicId,
        stage_index: usize,
        cohort_indices: &[usize],
        now: Timestamp,
        settings: &PresenceSettings,
    ) -> PresenceState {
        let beat = self.beats.get(id).copied().unwrap_or(Beat {
            last_heartbeat_at: Timestamp(i64::MIN / 2),
            last_active_at: Timestamp(i64::MIN / 2),
        });
        let connection = self.connection(id, now, settings);
        let activity = if now.millis_since(beat.last_active_at) > i64::from(settings.idle_threshold_seconds) * 1000 {
            Activity::Idle
        } else {
            Activity::Active
        };
        PresenceState {
            participant_public_id: id.clone(),
            last_heartbeat_at: beat.last_heartbeat_at,
            last_active_at: beat.last_active_at,
            connection,
            activity,
            status_flag: derive_status(stage_index, cohort_indices, connection, activity, settings),
        }
    }
}

/// Median of stage indices; the mean of the middle pair for even counts.
pub fn median_index(indices: &[usize]) -> Option<f64> {
    if indices.is_empty() {
        return None;
    }
    let mut v = indices.to_vec();
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

/// Disconnection or idleness dominate; otherwise lagging when more than the
/// margin behind the cohort median.
pub fn derive_status(
    stage_index: usize,
    cohort_indices: &[usize],
    connection: Connection,
    activity: Activity,
    settings: &PresenceSettings,
) -> StatusFlag {
    if connection == Connection::Disconnected || activity == Activity::Idle {
        return StatusFlag::Inactive;
    }
    match median_index(cohort_indices) {
        Some(m) if (stage_index as f64) < m - f64::from(settings.lagging_margin) => StatusFlag::Lagging,
        _ => StatusFlag::OnTrack,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CheckState {
    Pending,
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttentionCheck {
    pub id: String,
    pub participant_public_id: PublicId,
    pub sent_at: Timestamp,
    pub deadline_seconds: u32,
    pub state: CheckState,
}

impl AttentionCheck {
    pub fn deadline(&self) -> Timestamp {
        self.sent_at.plus_secs(i64::from(self.deadline_seconds))
    }

    /// Acknowledgment counts up to and including the deadline instant.
    pub fn acknowledged_in_time(&self, at: Timestamp) -> bool {
        at <= self.deadline()
    }

    pub fn expired(&self, now: Timestamp) -> bool {
        now > self.deadline()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Alert {
    pub id: String,
    pub participant_public_id: PublicId,
    pub message: String,
    pub raised_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facilitator_response: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttentionStats {
    pub sent: u32,
    pub passed: u32,
    pub failed: u32,
    pub pending: u32,
}

impl AttentionStats {
    pub fn pass_rate(&self) -> Option<f64> {
        (self.sent > 0).then(|| f64::from(self.passed) / f64::from(self.sent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(s: &str) -> PublicId {
        PublicId::from(s)
    }

    #[test]
    fn regular_heartbeats_stay_connected() {
        let s = PresenceSettings::default();
        let mut store = PresenceStore::new();
        let id = pid("p");
        for k in 0..20 {
            let t = Timestamp::from_secs(k * 15);
            store.record(&id, t, true);
            assert_eq!(store.connection(&id, t.plus_secs(14), &s), Connection::Connected);
        }
    }

    #[test]
    fn two_missed_beats_disconnect_at_thirty_seconds() {
        let s = PresenceSettings::default();
        let mut store = PresenceStore::new();
        let id = pid("p");
        store.record(&id, Timestamp::from_secs(0), true);
        // Walk the clock second by second and find the first disconnected instant.
        let first = (0..=31)
            .find(|&sec| store.connection(&id, Timestamp::from_secs(sec), &s) == Connection::Disconnected)
            .unwrap();
        assert_eq!(first, 30);
        store.record(&id, Timestamp::from_secs(31), true);
        assert_eq!(store.connection(&id, Timestamp::from_secs(31), &s), Connection::Connected);
    }

    #[test]
    fn status_rules() {
        let s = PresenceSettings::default();
        let idx = [3, 3, 3, 1];
        let c = Connection::Connected;
        let a = Activity::Active;
        assert_eq!(derive_status(1, &idx, c, a, &s), StatusFlag::Lagging);
        assert_eq!(derive_status(3, &idx, c, a, &s), StatusFlag::OnTrack);
        assert_eq!(derive_status(2, &[2, 2, 2, 2], c, a, &s), StatusFlag::OnTrack);
        assert_eq!(derive_status(3, &idx, Connection::Disconnected, a, &s), StatusFlag::Inactive);
        assert_eq!(derive_status(3, &idx, c, Activity::Idle, &s), StatusFlag::Inactive);
    }

    #[test]
    fn idle_after_threshold() {
        let s = PresenceSettings::default();
        let mut store = PresenceStore::new();
        let id = pid("p");
        store.record(&id, Timestamp::from_secs(0), true);
        for k in 1..=5 {
            store.record(&id, Timestamp::from_secs(k * 15), false);
        }
        let st = store.state(&id, 0, &[0], Timestamp::from_secs(75), &s);
        assert_eq!(st.connection, Connection::Connected);
        assert_eq!(st.activity, Activity::Idle);
        assert_eq!(st.status_flag, StatusFlag::Inactive);
    }

    #[test]
    fn attention_deadline_boundaries() {
        let check = AttentionCheck {
            id: "a".into(),
            participant_public_id: pid("p"),
            sent_at: Timestamp::from_secs(100),
            deadline_seconds: 30,
            state: CheckState::Pending,
        };
        assert!(check.acknowledged_in_time(Timestamp::from_secs(129)));
        assert!(!check.expired(Timestamp::from_secs(130)));
        assert!(check.expired(Timestamp::from_secs(131)));
    }
}
