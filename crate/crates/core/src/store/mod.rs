//! Persistence: the event log, snapshots and export archives.

pub mod export;
pub mod log;

pub use export::{export_archive, export_payout_csv, purge_older_than, read_archive, ExportError};
pub use log::{read_events, restore, EventLog, EventSink, FileSink, StorageError};
