//! Append-only transaction log of tool invocations.
//!
//! Each run owns one log. On disk the log is a line-delimited JSON file
//! (`<log-dir>/<run_id>.jsonl`) holding two kinds of entries:
//!
//! - `append`: a full [`ToolCallRecord`] written with status `PENDING`
//!   before the tool executes;
//! - `transition`: a status change for an existing record, carrying the
//!   result or error that the new status requires.
//!
//! Entries are never rewritten. Replaying the file reconstructs the
//! in-memory record sequence exactly. A torn final line (a crash in the
//! middle of a write) is detected on open and discarded; any other
//! malformed line is reported as corruption.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::value::Params;

pub type RecordId = u64;

/// Status lifecycle of a logged tool call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordStatus {
    Pending,
    Completed,
    Failed,
    Compensated,
    CompensationFailed,
}

impl RecordStatus {
    /// The legal transition set. Nothing else is allowed, including
    /// self-transitions.
    pub fn can_transition_to(self, next: RecordStatus) -> bool {
        use RecordStatus::*;
        matches!(
            (self, next),
            (Pending, Completed)
                | (Pending, Failed)
                | (Completed, Compensated)
                | (Completed, CompensationFailed)
        )
    }

    pub fn carries_result(self) -> bool {
        matches!(
            self,
            RecordStatus::Completed | RecordStatus::Compensated | RecordStatus::CompensationFailed
        )
    }

    pub fn carries_error(self) -> bool {
        matches!(self, RecordStatus::Failed | RecordStatus::CompensationFailed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Pending => "PENDING",
            RecordStatus::Completed => "COMPLETED",
            RecordStatus::Failed => "FAILED",
            RecordStatus::Compensated => "COMPENSATED",
            RecordStatus::CompensationFailed => "COMPENSATION_FAILED",
        }
    }
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wall-clock bounds of an invocation, in milliseconds since the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

/// One logged tool invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub record_id: RecordId,
    pub run_id: String,
    pub tool_name: String,
    pub params: Params,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamps: Timestamps,
    pub attempt: u32,
    /// Set on records that execute a compensation; names the forward
    /// record being undone. Such records are never themselves compensated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensates: Option<RecordId>,
}

/// A present-but-null field must stay `Some(Null)`; only absence is `None`.
fn present<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub record_id: RecordId,
    pub status: RecordStatus,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub finished_ms: u64,
}

/// One line of the log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Append(ToolCallRecord),
    Transition(TransitionEntry),
}

#[derive(Debug, Error)]
pub enum TxLogError {
    /// The backing file could not be written or read. The run must abort.
    #[error("transaction log storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("illegal transition for record {record_id}: {from} -> {to}")]
    IllegalTransition {
        record_id: RecordId,
        from: RecordStatus,
        to: RecordStatus,
    },
    #[error("record {record_id}: {reason}")]
    InvalidTransition { record_id: RecordId, reason: String },
    #[error("unknown record {0}")]
    UnknownRecord(RecordId),
    #[error("corrupt log {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl TxLogError {
    /// Storage failures invalidate the safety guarantee; everything else is a
    /// contract violation by the caller.
    pub fn is_storage(&self) -> bool {
        matches!(self, TxLogError::Storage { .. })
    }
}

/// When appended entries reach stable storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// Flush and fsync after every entry.
    #[default]
    EveryEntry,
    /// Buffer entries; flushed on [`TransactionLog::sync`] and on drop.
    Batched,
}

struct Storage {
    path: PathBuf,
    writer: BufWriter<File>,
}

/// Per-run transaction log.
pub struct TransactionLog {
    run_id: String,
    records: Vec<ToolCallRecord>,
    storage: Option<Storage>,
    sync: SyncPolicy,
}

impl fmt::Debug for TransactionLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransactionLog")
            .field("run_id", &self.run_id)
            .field("records", &self.records.len())
            .field("storage_path", &self.storage_path())
            .finish()
    }
}

/// Path of the log file for `run_id` inside `dir`.
pub fn log_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.jsonl"))
}

impl TransactionLog {
    /// A log with no backing file. Used by the simulator's fuzz runs.
    pub fn in_memory(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            records: Vec::new(),
            storage: None,
            sync: SyncPolicy::EveryEntry,
        }
    }

    /// Opens (or creates) the durable log for `run_id` under `dir`, replaying
    /// any existing entries. A torn trailing line is truncated away.
    pub fn open(dir: &Path, run_id: impl Into<String>, sync: SyncPolicy) -> Result<Self, TxLogError> {
        let run_id = run_id.into();
        let path = log_path(dir, &run_id);
        let storage_err = |source| TxLogError::Storage {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(dir).map_err(storage_err)?;
        let (records, valid_len) = match fs::read(&path) {
            Ok(bytes) => replay_bytes(&path, &bytes, Some(&run_id))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => (Vec::new(), 0),
            Err(e) => return Err(storage_err(e)),
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(storage_err)?;
        if file.metadata().map_err(storage_err)?.len() != valid_len as u64 {
            file.set_len(valid_len as u64).map_err(storage_err)?;
            file.sync_data().map_err(storage_err)?;
        }
        Ok(Self {
            run_id,
            records,
            storage: Some(Storage {
                path,
                writer: BufWriter::new(file),
            }),
            sync,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn storage_path(&self) -> Option<&Path> {
        self.storage.as_ref().map(|s| s.path.as_path())
    }

    /// Records in append order.
    pub fn records(&self) -> &[ToolCallRecord] {
        &self.records
    }

    pub fn get(&self, record_id: RecordId) -> Option<&ToolCallRecord> {
        // ids are dense from 1, checked on append and replay
        let idx = usize::try_from(record_id).ok()?.checked_sub(1)?;
        self.records.get(idx)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Persists a new `PENDING` record and returns it. The entry is durable
    /// (under [`SyncPolicy::EveryEntry`]) before this returns.
    pub fn append(
        &mut self,
        tool_name: &str,
        params: Params,
        attempt: u32,
        compensates: Option<RecordId>,
        now_ms: u64,
    ) -> Result<ToolCallRecord, TxLogError> {
        let record = ToolCallRecord {
            record_id: self.records.len() as RecordId + 1,
            run_id: self.run_id.clone(),
            tool_name: tool_name.to_owned(),
            params,
            result: None,
            status: RecordStatus::Pending,
            error: None,
            timestamps: Timestamps {
                started_ms: now_ms,
                finished_ms: None,
            },
            attempt: attempt.max(1),
            compensates,
        };
        self.persist(&LogEntry::Append(record.clone()))?;
        self.records.push(record.clone());
        Ok(record)
    }

    /// Moves a record to `status`, attaching `result`/`error` as the lifecycle
    /// requires. Compensation statuses keep the record's existing result.
    pub fn transition(
        &mut self,
        record_id: RecordId,
        status: RecordStatus,
        result: Option<Value>,
        error: Option<String>,
        now_ms: u64,
    ) -> Result<ToolCallRecord, TxLogError> {
        let current = self.get(record_id).ok_or(TxLogError::UnknownRecord(record_id))?;
        let entry = TransitionEntry {
            record_id,
            status,
            result,
            error,
            finished_ms: now_ms,
        };
        let next = apply_transition(current, &entry)?;
        self.persist(&LogEntry::Transition(entry))?;
        let idx = record_id as usize - 1;
        self.records[idx] = next.clone();
        Ok(next)
    }

    /// Flushes buffered entries and fsyncs the file.
    pub fn sync(&mut self) -> Result<(), TxLogError> {
        if let Some(storage) = self.storage.as_mut() {
            let path = storage.path.clone();
            let err = |source| TxLogError::Storage {
                path: path.clone(),
                source,
            };
            storage.writer.flush().map_err(&err)?;
            storage.writer.get_ref().sync_data().map_err(&err)?;
        }
        Ok(())
    }

    fn persist(&mut self, entry: &LogEntry) -> Result<(), TxLogError> {
        let Some(storage) = self.storage.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::to_vec(entry).expect("log entries always serialize");
        line.push(b'\n');
        let path = storage.path.clone();
        let err = |source| TxLogError::Storage {
            path: path.clone(),
            source,
        };
        storage.writer.write_all(&line).map_err(err)?;
        if self.sync == SyncPolicy::EveryEntry {
            storage.writer.flush().map_err(err)?;
            storage.writer.get_ref().sync_data().map_err(err)?;
        }
        Ok(())
    }
}

impl Drop for TransactionLog {
    fn drop(&mut self) {
        if let Some(storage) = self.storage.as_mut() {
            let _ = storage.writer.flush();
        }
    }
}

/// Validates `entry` against `current` and returns the updated record.
fn apply_transition(current: &ToolCallRecord, entry: &TransitionEntry) -> Result<ToolCallRecord, TxLogError> {
    let record_id = current.record_id;
    if !current.status.can_transition_to(entry.status) {
        return Err(TxLogError::IllegalTransition {
            record_id,
            from: current.status,
            to: entry.status,
        });
    }
    let invalid = |reason: &str| TxLogError::InvalidTransition {
        record_id,
        reason: reason.to_owned(),
    };
    let mut next = current.clone();
    match entry.status {
        RecordStatus::Completed => {
            let Some(result) = entry.result.clone() else {
                return Err(invalid("COMPLETED requires a result"));
            };
            next.result = Some(result);
        }
        RecordStatus::Failed => {
            if entry.result.is_some() {
                return Err(invalid("FAILED records carry no result"));
            }
        }
        RecordStatus::Compensated | RecordStatus::CompensationFailed => {
            if entry.result.is_some() {
                return Err(invalid("compensation keeps the forward result"));
            }
        }
        RecordStatus::Pending => unreachable!("no transition targets PENDING"),
    }
    match (entry.status.carries_error(), &entry.error) {
        (true, None) => return Err(invalid("status requires an error message")),
        (false, Some(_)) => return Err(invalid("status does not carry an error")),
        _ => {}
    }
    next.error = entry.error.clone();
    next.status = entry.status;
    next.timestamps.finished_ms = Some(entry.finished_ms);
    Ok(next)
}

/// Replays log bytes. Returns the records and the byte length of the valid
/// prefix; a torn final line is excluded from that prefix.
fn replay_bytes(
    path: &Path,
    bytes: &[u8],
    expected_run: Option<&str>,
) -> Result<(Vec<ToolCallRecord>, usize), TxLogError> {
    let mut records: Vec<ToolCallRecord> = Vec::new();
    let mut index: HashMap<RecordId, usize> = HashMap::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, terminated) = match rest.iter().position(|&b| b == b'\n') {
            Some(end) => (&rest[..end], true),
            None => (rest, false),
        };
        let corrupt = |reason: String| TxLogError::Corrupt {
            path: path.to_owned(),
            line: line_no,
            reason,
        };
        let parsed = serde_json::from_slice::<LogEntry>(line);
        let entry = match parsed {
            Ok(entry) if terminated => entry,
            // unterminated tail: torn write, drop it
            _ if !terminated => break,
            Err(e) => return Err(corrupt(e.to_string())),
            Ok(_) => unreachable!(),
        };
        match entry {
            LogEntry::Append(record) => {
                let expected_id = records.len() as RecordId + 1;
                if record.record_id != expected_id {
                    return Err(corrupt(format!(
                        "record_id {} out of sequence, expected {expected_id}",
                        record.record_id
                    )));
                }
                if record.status != RecordStatus::Pending || record.result.is_some() || record.error.is_some() {
                    return Err(corrupt("appended records must be bare PENDING".into()));
                }
                if let Some(run) = expected_run {
                    if record.run_id != run {
                        return Err(corrupt(format!("record belongs to run {}", record.run_id)));
                    }
                }
                index.insert(record.record_id, records.len());
                records.push(record);
            }
            LogEntry::Transition(t) => {
                let idx = *index
                    .get(&t.record_id)
                    .ok_or_else(|| corrupt(format!("transition for unknown record {}", t.record_id)))?;
                records[idx] = apply_transition(&records[idx], &t).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        offset += line.len() + 1;
    }
    Ok((records, offset.min(bytes.len())))
}

/// Parses a log from bytes without touching the filesystem. Torn tails are
/// ignored, as on open.
pub fn replay(bytes: &[u8]) -> Result<Vec<ToolCallRecord>, TxLogError> {
    replay_bytes(Path::new("<memory>"), bytes, None).map(|(records, _)| records)
}

/// Reads all records of `run_id` from `dir` without opening the log for
/// writing. A run with no file is an empty run.
pub fn get_all(dir: &Path, run_id: &str) -> Result<Vec<ToolCallRecord>, TxLogError> {
    match read_file(&log_path(dir, run_id)) {
        Err(TxLogError::Storage { source, .. }) if source.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        other => other,
    }
}

/// Reads and replays a log file.
pub fn read_file(path: &Path) -> Result<Vec<ToolCallRecord>, TxLogError> {
    let bytes = fs::read(path).map_err(|source| TxLogError::Storage {
        path: path.to_owned(),
        source,
    })?;
    replay_bytes(path, &bytes, None).map(|(records, _)| records)
}

/// Serializes `records` as a log an equivalent replay would accept: one
/// append per record plus the transitions needed to reach its status.
pub fn encode_records(records: &[ToolCallRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut push = |entry: &LogEntry| {
        out.extend(serde_json::to_vec(entry).expect("log entries always serialize"));
        out.push(b'\n');
    };
    for r in records {
        let mut bare = r.clone();
        bare.status = RecordStatus::Pending;
        bare.result = None;
        bare.error = None;
        bare.timestamps.finished_ms = None;
        push(&LogEntry::Append(bare));
        let finished = r.timestamps.finished_ms.unwrap_or(r.timestamps.started_ms);
        let path: &[RecordStatus] = match r.status {
            RecordStatus::Pending => &[],
            RecordStatus::Completed => &[RecordStatus::Completed],
            RecordStatus::Failed => &[RecordStatus::Failed],
            RecordStatus::Compensated => &[RecordStatus::Completed, RecordStatus::Compensated],
            RecordStatus::CompensationFailed => &[RecordStatus::Completed, RecordStatus::CompensationFailed],
        };
        for &status in path {
            push(&LogEntry::Transition(TransitionEntry {
                record_id: r.record_id,
                status,
                result: (status == RecordStatus::Completed).then(|| r.result.clone()).flatten(),
                error: if status.carries_error() { r.error.clone() } else { None },
                finished_ms: finished,
            }));
        }
    }
    out
}

/// Status history of every record, derived from the raw entries of a log.
/// Used to audit lifecycle soundness of persisted logs.
pub fn status_histories(bytes: &[u8]) -> Result<HashMap<RecordId, Vec<RecordStatus>>, TxLogError> {
    let mut histories: HashMap<RecordId, Vec<RecordStatus>> = HashMap::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_slice(line).map_err(|e| TxLogError::Corrupt {
            path: PathBuf::from("<memory>"),
            line: i + 1,
            reason: e.to_string(),
        })?;
        match entry {
            LogEntry::Append(r) => {
                histories.insert(r.record_id, vec![r.status]);
            }
            LogEntry::Transition(t) => histories.entry(t.record_id).or_default().push(t.status),
        }
    }
    Ok(histories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn params(v: Value) -> Params {
        v.as_object().cloned().unwrap()
    }

    #[test]
    fn first_append_is_pending_with_id_one() {
        let mut log = TransactionLog::in_memory("r1");
        let rec = log.append("book_flight", params(json!({"flight_id": "F100"})), 1, None, 10).unwrap();
        assert_eq!(rec.record_id, 1);
        assert_eq!(rec.status, RecordStatus::Pending);
        assert!(rec.result.is_none());
    }

    #[test]
    fn ids_are_monotone_and_file_has_one_line_each() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TransactionLog::open(dir.path(), "r1", SyncPolicy::EveryEntry).unwrap();
        let a = log.append("a", Params::new(), 1, None, 0).unwrap();
        let b = log.append("b", Params::new(), 1, None, 0).unwrap();
        assert_eq!((a.record_id, b.record_id), (1, 2));
        let text = fs::read_to_string(log_path(dir.path(), "r1")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn legal_and_illegal_transitions() {
        let mut log = TransactionLog::in_memory("r1");
        log.append("book_flight", Params::new(), 1, None, 0).unwrap();
        let done = log
            .transition(1, RecordStatus::Completed, Some(json!({"confirmation_ref": "C9"})), None, 1)
            .unwrap();
        assert_eq!(done.status, RecordStatus::Completed);
        assert_eq!(done.timestamps.finished_ms, Some(1));

        let err = log.transition(1, RecordStatus::Pending, None, None, 2).unwrap_err();
        assert!(matches!(err, TxLogError::IllegalTransition { .. }));

        log.append("x", Params::new(), 1, None, 0).unwrap();
        log.transition(2, RecordStatus::Failed, None, Some("boom".into()), 1).unwrap();
        let err = log.transition(2, RecordStatus::Compensated, None, None, 2).unwrap_err();
        assert!(matches!(
            err,
            TxLogError::IllegalTransition {
                from: RecordStatus::Failed,
                to: RecordStatus::Compensated,
                ..
            }
        ));
    }

    #[test]
    fn result_and_error_attachment_rules() {
        let mut log = TransactionLog::in_memory("r1");
        log.append("t", Params::new(), 1, None, 0).unwrap();
        assert!(log.transition(1, RecordStatus::Completed, None, None, 1).is_err());
        assert!(log.transition(1, RecordStatus::Failed, None, None, 1).is_err());
        assert!(log
            .transition(1, RecordStatus::Failed, Some(json!(1)), Some("e".into()), 1)
            .is_err());
        // null is a real result
        let rec = log.transition(1, RecordStatus::Completed, Some(Value::Null), None, 1).unwrap();
        assert_eq!(rec.result, Some(Value::Null));
        let rec = log
            .transition(1, RecordStatus::CompensationFailed, None, Some("cancel failed".into()), 2)
            .unwrap();
        assert_eq!(rec.result, Some(Value::Null));
        assert_eq!(rec.error.as_deref(), Some("cancel failed"));
    }

    #[test]
    fn unknown_record_is_rejected() {
        let mut log = TransactionLog::in_memory("r1");
        assert!(matches!(
            log.transition(7, RecordStatus::Completed, Some(json!(1)), None, 0),
            Err(TxLogError::UnknownRecord(7))
        ));
    }

    #[test]
    fn reopen_replays_identical_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let before = {
            let mut log = TransactionLog::open(dir.path(), "run", SyncPolicy::Batched).unwrap();
            log.append("a", params(json!({"k": 1})), 1, None, 5).unwrap();
            log.transition(1, RecordStatus::Completed, Some(Value::Null), None, 6).unwrap();
            log.append("b", params(json!({"k": [1, "two"]})), 2, None, 7).unwrap();
            log.transition(2, RecordStatus::Failed, None, Some("x".into()), 8).unwrap();
            log.append("c", Params::new(), 1, Some(1), 9).unwrap();
            log.sync().unwrap();
            log.records().to_vec()
        };
        let log = TransactionLog::open(dir.path(), "run", SyncPolicy::EveryEntry).unwrap();
        assert_eq!(log.records(), before.as_slice());
        assert_eq!(get_all(dir.path(), "run").unwrap(), before);
    }

    #[test]
    fn torn_tail_is_discarded_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = TransactionLog::open(dir.path(), "run", SyncPolicy::EveryEntry).unwrap();
            log.append("a", Params::new(), 1, None, 0).unwrap();
        }
        let path = log_path(dir.path(), "run");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"kind\":\"append\",\"record_id\":2,\"run").unwrap();
        drop(f);

        let mut log = TransactionLog::open(dir.path(), "run", SyncPolicy::EveryEntry).unwrap();
        assert_eq!(log.len(), 1);
        let rec = log.append("b", Params::new(), 1, None, 0).unwrap();
        assert_eq!(rec.record_id, 2);
        drop(log);
        assert_eq!(read_file(&path).unwrap().len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let bytes = b"not json\n{\"kind\":\"append\"}\n";
        assert!(matches!(replay(bytes), Err(TxLogError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn replay_rejects_illegal_history() {
        let mut log = TransactionLog::in_memory("r");
        log.append("a", Params::new(), 1, None, 0).unwrap();
        log.transition(1, RecordStatus::Failed, None, Some("e".into()), 0).unwrap();
        let mut bytes = encode_records(log.records());
        let bad = LogEntry::Transition(TransitionEntry {
            record_id: 1,
            status: RecordStatus::Compensated,
            result: None,
            error: None,
            finished_ms: 1,
        });
        bytes.extend(serde_json::to_vec(&bad).unwrap());
        bytes.push(b'\n');
        assert!(matches!(replay(&bytes), Err(TxLogError::Corrupt { line: 3, .. })));
    }

    #[test]
    fn unknown_run_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(get_all(dir.path(), "nope").unwrap().is_empty());
    }

    #[test]
    fn storage_failure_surfaces() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"").unwrap();
        // a regular file cannot be used as the log directory
        let err = TransactionLog::open(&file, "r", SyncPolicy::EveryEntry).unwrap_err();
        assert!(err.is_storage());
    }

    #[test]
    fn histories_follow_entries() {
        let mut log = TransactionLog::in_memory("r");
        log.append("a", Params::new(), 1, None, 0).unwrap();
        log.transition(1, RecordStatus::Completed, Some(json!(1)), None, 0).unwrap();
        log.transition(1, RecordStatus::Compensated, None, None, 0).unwrap();
        let h = status_histories(&encode_records(log.records())).unwrap();
        assert_eq!(
            h[&1],
            vec![RecordStatus::Pending, RecordStatus::Completed, RecordStatus::Compensated]
        );
    }
}
