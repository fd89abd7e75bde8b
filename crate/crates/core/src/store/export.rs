//! Export archive, payout CSV and retention purge.

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::engine::event::{Event, EventRecord};
use crate::engine::state::{ExperimentState, ParticipantRecord, ParticipantStatus};
use crate::engine::views::{answer_cells, PayoutView};
use crate::ids::PrivateIdDigest;
use crate::model::canonical::{to_canonical_line, to_canonical_pretty};
use crate::model::stage::StageParams;
use crate::money::Money;
use crate::presence::AttentionStats;
use crate::tally::{compute_payout, PayoutMode};
use crate::time::Timestamp;

use super::log::{read_events, StorageError};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("experiment has no payout stage")]
    NoPayoutStage,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub const CHAT_COLUMNS: [&str; 6] = ["timestamp", "cohortId", "stageId", "publicId", "displayName", "message"];

/// Placeholder written over private-id digests in exported events.
pub const REDACTED: &str = "redacted";

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, ExportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| ExportError::Io(e.into_error()))
}

/// The event log as exported: canonical lines, private-id digests redacted.
pub fn export_events(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = match &r.event {
            Event::ParticipantCreated { .. } => {
                let mut r = r.clone();
                if let Event::ParticipantCreated { private_id_digest, .. } = &mut r.event {
                    *private_id_digest = PrivateIdDigest(REDACTED.to_string());
                }
                to_canonical_line(&r)
            }
            _ => to_canonical_line(r),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// One CSV per cohort, messages in posting order.
pub fn chat_csvs(state: &ExperimentState) -> Result<Vec<(String, Vec<u8>)>, ExportError> {
    let mut out = Vec::new();
    for c in state.cohorts.values() {
        let mut messages: Vec<_> = c.chats.values().flat_map(|ch| ch.messages.iter()).collect();
        messages.sort_by_key(|m| (m.timestamp, message_seq(&m.id)));
        let rows = messages.into_iter().map(|m| {
            vec![
                m.timestamp.to_rfc3339(),
                m.cohort_id.to_string(),
                m.stage_id.to_string(),
                m.author_id.clone(),
                m.display_name.clone(),
                m.text.clone(),
            ]
        });
        out.push((format!("chats/{}.csv", c.id), csv_bytes(&CHAT_COLUMNS, rows)?));
    }
    Ok(out)
}

fn message_seq(id: &str) -> u64 {
    id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(0)
}

pub fn surveys_csv(state: &ExperimentState) -> Result<Vec<u8>, ExportError> {
    let mut rows = Vec::new();
    for p in state.participants.values() {
        for stage in state.stages() {
            let Some(a) = p.stage_answers.get(&stage.id) else { continue };
            for (q, v) in answer_cells(&a.content) {
                rows.push(vec![
                    p.cohort_id.to_string(),
                    stage.id.to_string(),
                    p.public_id.to_string(),
                    p.display_name(),
                    q,
                    v,
                    a.submitted_at.to_rfc3339(),
                    a.timed_out.to_string(),
                ]);
            }
        }
    }
    csv_bytes(
        &["cohortId", "stageId", "publicId", "displayName", "questionId", "answer", "submittedAt", "timedOut"],
        rows,
    )
}

pub fn participants_csv(state: &ExperimentState) -> Result<Vec<u8>, ExportError> {
    let rows = state.participants.values().map(|p| {
        vec![
            p.public_id.to_string(),
            p.external_id.clone().unwrap_or_default(),
            p.cohort_id.to_string(),
            p.status.as_str().to_string(),
            p.current_stage_index.to_string(),
            p.display_name(),
            if p.is_agent() { "agent" } else { "human" }.to_string(),
            p.joined.to_string(),
        ]
    });
    csv_bytes(
        &["publicId", "externalId", "cohortId", "status", "currentStageIndex", "displayName", "kind", "joined"],
        rows,
    )
}

/// Amounts for one participant: the computed row once they reached the
/// payout stage, otherwise what they have earned so far.
fn payout_amounts(state: &ExperimentState, p: &ParticipantRecord) -> Option<(Money, Money, Money, String)> {
    if let Some(row) = state.payouts.get(&p.public_id) {
        return Some((row.base_pay, row.bonus, row.total, row.currency_unit.clone()));
    }
    let stage = state.stages().iter().find(|s| matches!(s.params, StageParams::Payout(_)))?;
    let StageParams::Payout(params) = &stage.params else { return None };
    let cohort = state.cohorts.get(&p.cohort_id)?;
    let view = PayoutView {
        state,
        cohort,
        participant: p,
    };
    let row = compute_payout(&stage.id, params, &view, state.seed, PayoutMode::EarnedSoFar).ok()?;
    Some((row.base_pay, row.bonus, row.total, row.currency_unit))
}

/// Human participants that joined, in publicId order.
fn payees(state: &ExperimentState) -> impl Iterator<Item = &ParticipantRecord> {
    state.participants.values().filter(|p| p.joined && !p.is_agent())
}

pub fn payouts_csv(state: &ExperimentState) -> Result<Vec<u8>, ExportError> {
    let rows = payees(state).filter_map(|p| {
        let (base, bonus, total, unit) = payout_amounts(state, p)?;
        Some(vec![
            p.public_id.to_string(),
            p.external_id.clone().unwrap_or_default(),
            p.status.as_str().to_string(),
            base.to_string(),
            bonus.to_string(),
            total.to_string(),
            unit,
        ])
    });
    csv_bytes(
        &["publicId", "externalId", "completionStatus", "basePay", "bonus", "total", "currencyUnit"],
        rows,
    )
}

/// `externalId,completionStatus,bonus`, one row per human participant that
/// joined. When any participant lacks an external id its publicId is used
/// and an `idKind` column says which id each row carries.
pub fn export_payout_csv(state: &ExperimentState) -> Result<Vec<u8>, ExportError> {
    if !state.stages().iter().any(|s| matches!(s.params, StageParams::Payout(_))) {
        return Err(ExportError::NoPayoutStage);
    }
    let people: Vec<&ParticipantRecord> = payees(state).collect();
    let fallback = people.iter().any(|p| p.external_id.is_none());
    let rows: Vec<Vec<String>> = people
        .iter()
        .map(|p| {
            let bonus = payout_amounts(state, p).map(|a| a.1).unwrap_or(Money::ZERO);
            let (id, kind) = match &p.external_id {
                Some(e) => (e.clone(), "externalId"),
                None => (p.public_id.to_string(), "publicId"),
            };
            let mut row = vec![id, p.status.as_str().to_string(), bonus.to_string()];
            if fallback {
                row.push(kind.to_string());
            }
            row
        })
        .collect();
    if fallback {
        csv_bytes(&["externalId", "completionStatus", "bonus", "idKind"], rows)
    } else {
        csv_bytes(&["externalId", "completionStatus", "bonus"], rows)
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExportStats {
    pub attention: AttentionStats,
    pub participants: usize,
    pub completed: usize,
    pub booted: usize,
    pub cohorts: usize,
    pub messages: usize,
    pub alerts: usize,
}

pub fn export_stats(state: &ExperimentState) -> ExportStats {
    let count = |s: ParticipantStatus| state.participants.values().filter(|p| p.status == s).count();
    ExportStats {
        attention: state.attention_stats(),
        participants: state.participants.len(),
        completed: count(ParticipantStatus::Completed),
        booted: count(ParticipantStatus::Booted),
        cohorts: state.cohorts.len(),
        messages: state
            .cohorts
            .values()
            .flat_map(|c| c.chats.values())
            .map(|ch| ch.messages.len())
            .sum(),
        alerts: state.alerts.len(),
    }
}

/// Zip archive of the whole experiment. Entries carry a fixed timestamp, so
/// the same log always yields the same bytes.
pub fn export_archive(state: &ExperimentState, records: &[EventRecord]) -> Result<Vec<u8>, ExportError> {
    let mut entries: Vec<(String, Vec<u8>)> = vec![
        ("config.json".to_string(), to_canonical_pretty(&state.config)),
        ("events.jsonl".to_string(), export_events(records).into_bytes()),
    ];
    entries.extend(chat_csvs(state)?);
    entries.push(("surveys.csv".to_string(), surveys_csv(state)?));
    entries.push(("participants.csv".to_string(), participants_csv(state)?));
    entries.push(("payouts.csv".to_string(), payouts_csv(state)?));
    if let Ok(csv) = export_payout_csv(state) {
        entries.push(("completion.csv".to_string(), csv));
    }
    entries.push(("stats.json".to_string(), to_canonical_pretty(&export_stats(state))));

    let options = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Deflated)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    for (name, bytes) in entries {
        zip.start_file(name, options)?;
        zip.write_all(&bytes)?;
    }
    Ok(zip.finish()?.into_inner())
}

/// Entry names and contents of an archive, for tests and tooling.
pub fn read_archive(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, ExportError> {
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes))?;
    let mut out = Vec::new();
    for i in 0..zip.len() {
        let mut f = zip.by_index(i)?;
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut f, &mut buf)?;
        out.push((f.name().to_string(), buf));
    }
    Ok(out)
}

/// Deletes experiment directories under `root` whose last event is older
/// than `cutoff`. Returns the removed directories.
pub fn purge_older_than(root: &Path, cutoff: Timestamp) -> Result<Vec<PathBuf>, ExportError> {
    let mut removed = Vec::new();
    let entries = match std::fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(removed),
        Err(e) => return Err(e.into()),
    };
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(super::log::EVENTS_FILE).is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let records = read_events(&dir)?;
        let last = records.last().map(|r| r.timestamp);
        if last.is_none_or(|t| t < cutoff) {
            std::fs::remove_dir_all(&dir)?;
            removed.push(dir);
        }
    }
    Ok(removed)
}
