//! Append-only event log with optional file persistence and snapshots.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::engine::event::{Actor, Event, EventRecord};
use crate::engine::state::{ExperimentState, ReplayError};
use crate::ids::CohortId;
use crate::model::canonical::{from_canonical, to_canonical_line, to_canonical_pretty};
use crate::time::Timestamp;

/// Take a snapshot after every this many records.
pub const SNAPSHOT_INTERVAL: u64 = 500;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Durable destination for records. `append` must not return before the
/// record is stored.
pub trait EventSink: Send {
    fn append(&mut self, rec: &EventRecord) -> Result<(), StorageError>;

    fn snapshot(&mut self, _state: &ExperimentState) -> Result<(), StorageError> {
        Ok(())
    }
}

/// `events.jsonl` plus `snapshots/<applied>.json` under one directory.
#[derive(Debug)]
pub struct FileSink {
    dir: PathBuf,
    events: File,
    sync: bool,
}

impl FileSink {
    /// Opens the directory for appending. With `sync`, every append is
    /// flushed to disk before returning.
    pub fn open(dir: &Path, sync: bool) -> Result<Self, StorageError> {
        std::fs::create_dir_all(dir.join(SNAPSHOT_DIR)).map_err(io(dir))?;
        let path = dir.join(EVENTS_FILE);
        let events = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        Ok(FileSink {
            dir: dir.to_path_buf(),
            events,
            sync,
        })
    }
}

impl EventSink for FileSink {
    fn append(&mut self, rec: &EventRecord) -> Result<(), StorageError> {
        let path = self.dir.join(EVENTS_FILE);
        let mut line = to_canonical_line(rec);
        line.push('\n');
        self.events.write_all(line.as_bytes()).map_err(io(&path))?;
        if self.sync {
            self.events.sync_data().map_err(io(&path))?;
        }
        Ok(())
    }

    fn snapshot(&mut self, state: &ExperimentState) -> Result<(), StorageError> {
        let dir = self.dir.join(SNAPSHOT_DIR);
        let tmp = dir.join(format!("{}.json.tmp", state.applied));
        let dst = dir.join(format!("{}.json", state.applied));
        std::fs::write(&tmp, to_canonical_pretty(state)).map_err(io(&tmp))?;
        std::fs::rename(&tmp, &dst).map_err(io(&dst))?;
        Ok(())
    }
}

/// In-memory record list with per-stream sequence counters.
pub struct EventLog {
    records: Vec<EventRecord>,
    sequences: BTreeMap<Option<CohortId>, u64>,
    sink: Option<Box<dyn EventSink>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("records", &self.records.len())
            .field("sink", &self.sink.is_some())
            .finish()
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl EventLog {
    pub fn new() -> Self {
        EventLog {
            records: Vec::new(),
            sequences: BTreeMap::new(),
            sink: None,
        }
    }

    pub fn with_sink(mut self, sink: Box<dyn EventSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    /// Resumes a log from existing records (already persisted).
    pub fn from_records(records: Vec<EventRecord>) -> Self {
        let mut sequences = BTreeMap::new();
        for r in &records {
            sequences.insert(r.cohort_id.clone(), r.sequence);
        }
        EventLog {
            records,
            sequences,
            sink: None,
        }
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores the record and returns it. Nothing is kept if the sink fails.
    pub fn append(
        &mut self,
        cohort_id: Option<CohortId>,
        timestamp: Timestamp,
        actor: Actor,
        event: Event,
    ) -> Result<EventRecord, StorageError> {
        let sequence = self.sequences.get(&cohort_id).copied().unwrap_or(0) + 1;
        let rec = EventRecord {
            index: self.records.len() as u64,
            cohort_id,
            sequence,
            timestamp,
            actor,
            event,
        };
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&rec)?;
        }
        self.sequences.insert(rec.cohort_id.clone(), sequence);
        self.records.push(rec.clone());
        Ok(rec)
    }

    pub fn maybe_snapshot(&mut self, state: &ExperimentState) -> Result<(), StorageError> {
        if state.applied.is_multiple_of(SNAPSHOT_INTERVAL) {
            if let Some(sink) = self.sink.as_mut() {
                sink.snapshot(state)?;
            }
        }
        Ok(())
    }

    /// The whole log as canonical lines.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&to_canonical_line(r));
            s.push('\n');
        }
        s
    }
}

/// Reads `events.jsonl`. A torn final line (no trailing newline) is dropped.
pub fn read_events(dir: &Path) -> Result<Vec<EventRecord>, StorageError> {
    let path = dir.join(EVENTS_FILE);
    let bytes = std::fs::read(&path).map_err(io(&path))?;
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => &bytes[..=i],
        None => &bytes[..0],
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(complete).lines().enumerate() {
        let line = line.map_err(io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = from_canonical(line.as_bytes()).map_err(|e| StorageError::Corrupt {
            path: path.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Latest snapshot whose record count does not exceed `limit`.
pub fn latest_snapshot(dir: &Path, limit: u64) -> Result<Option<ExperimentState>, StorageError> {
    let sdir = dir.join(SNAPSHOT_DIR);
    let entries = match std::fs::read_dir(&sdir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io(&sdir)(e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(io(&sdir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(n) = name.strip_suffix(".json").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if n <= limit && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    let Some((_, path)) = best else { return Ok(None) };
    let bytes = std::fs::read(&path).map_err(io(&path))?;
    let state = from_canonical(&bytes).map_err(|e| StorageError::Corrupt {
        path: path.clone(),
        line: 0,
        reason: e.to_string(),
    })?;
    Ok(Some(state))
}

/// Rebuilds state from a directory: newest usable snapshot, then the tail.
pub fn restore(dir: &Path) -> Result<(ExperimentState, Vec<EventRecord>), StorageError> {
    let records = read_events(dir)?;
    let state = match latest_snapshot(dir, records.len() as u64)? {
        Some(mut s) => {
            let from = s.applied as usize;
            s.apply_all(&records[from..])?;
            s
        }
        None => ExperimentState::replay(&records)?,
    };
    Ok((state, records))
}
