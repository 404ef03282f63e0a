//! Durable registry state: a snapshot file plus a journal of records
//! ingested since the snapshot.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::Registry;
use crate::agent::AgentError;
use crate::broker::BrokerRecord;
use crate::model::DeliveryMode;

pub const JOURNAL_FILE: &str = "monitor.journal";
pub const SNAPSHOT_FILE: &str = "monitor.snapshot.json";
pub const DEAD_LETTER_FILE: &str = "monitor.deadletter";

#[derive(Debug, Serialize, Deserialize)]
struct JournalLine {
    topic: String,
    partition: u32,
    offset: u64,
    append_time_ms: i64,
    /// The record's value, lossily decoded when it is not UTF-8.
    value: String,
}

impl JournalLine {
    fn of(record: &BrokerRecord) -> Self {
        Self {
            topic: record.topic.clone(),
            partition: record.partition,
            offset: record.offset,
            append_time_ms: record.append_time_ms,
            value: String::from_utf8_lossy(&record.value).into_owned(),
        }
    }

    fn into_record(self) -> BrokerRecord {
        BrokerRecord {
            topic: self.topic,
            partition: self.partition,
            offset: self.offset,
            key: None,
            value: self.value.into_bytes(),
            append_time_ms: self.append_time_ms,
        }
    }
}

#[derive(Debug, Serialize)]
struct DeadLetter<'a> {
    topic: &'a str,
    partition: u32,
    offset: u64,
    reason: &'a str,
    value: String,
}

pub struct MonitorStore {
    dir: PathBuf,
    journal: BufWriter<File>,
    journaled: usize,
}

impl MonitorStore {
    /// Loads the snapshot and replays the journal over it.
    pub fn open(dir: &Path, delivery: DeliveryMode) -> Result<(Self, Registry), AgentError> {
        fs::create_dir_all(dir).map_err(|e| AgentError::io(dir, e))?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut registry = match fs::read(&snapshot_path) {
            Ok(raw) => Registry::from_snapshot_bytes(&raw, delivery).map_err(|e| {
                AgentError::io(&snapshot_path, io::Error::new(io::ErrorKind::InvalidData, e))
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Registry::new(delivery),
            Err(e) => return Err(AgentError::io(&snapshot_path, e)),
        };
        let journal_path = dir.join(JOURNAL_FILE);
        let mut journaled = 0;
        match File::open(&journal_path) {
            Ok(file) => {
                for line in BufReader::new(file).lines() {
                    let line = line.map_err(|e| AgentError::io(&journal_path, e))?;
                    match serde_json::from_str::<JournalLine>(&line) {
                        Ok(entry) => {
                            registry.ingest(&entry.into_record());
                            journaled += 1;
                        }
                        // A torn final line from a crash mid-append.
                        Err(e) => log::warn!("{}: skipping unreadable line: {e}", journal_path.display()),
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(AgentError::io(&journal_path, e)),
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(|e| AgentError::io(&journal_path, e))?;
        let store = Self {
            dir: dir.to_path_buf(),
            journal: BufWriter::new(journal),
            journaled,
        };
        Ok((store, registry))
    }

    pub fn append(&mut self, record: &BrokerRecord) -> Result<(), AgentError> {
        let mut line = serde_json::to_vec(&JournalLine::of(record)).expect("journal line serializes");
        line.push(b'\n');
        self.journal
            .write_all(&line)
            .map_err(|e| AgentError::io(&self.dir.join(JOURNAL_FILE), e))?;
        self.journaled += 1;
        Ok(())
    }

    /// Makes appended lines durable.
    pub fn flush(&mut self) -> Result<(), AgentError> {
        let path = self.dir.join(JOURNAL_FILE);
        self.journal.flush().map_err(|e| AgentError::io(&path, e))?;
        self.journal.get_ref().sync_data().map_err(|e| AgentError::io(&path, e))
    }

    /// Lines in the journal since the last snapshot.
    pub fn journaled(&self) -> usize {
        self.journaled
    }

    /// Writes a snapshot of `registry` and empties the journal.
    pub fn snapshot(&mut self, registry: &Registry) -> Result<(), AgentError> {
        self.flush()?;
        let path = self.dir.join(SNAPSHOT_FILE);
        crate::broker::write_atomic(&path, &registry.to_snapshot_bytes())
            .map_err(|e| AgentError::io(&path, io::Error::other(e.to_string())))?;
        let journal_path = self.dir.join(JOURNAL_FILE);
        let file = File::create(&journal_path).map_err(|e| AgentError::io(&journal_path, e))?;
        file.sync_all().map_err(|e| AgentError::io(&journal_path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(&journal_path)
            .map_err(|e| AgentError::io(&journal_path, e))?;
        self.journal = BufWriter::new(file);
        self.journaled = 0;
        Ok(())
    }

    pub fn dead_letter(&self, record: &BrokerRecord, reason: &str) -> Result<(), AgentError> {
        let path = self.dir.join(DEAD_LETTER_FILE);
        let entry = DeadLetter {
            topic: &record.topic,
            partition: record.partition,
            offset: record.offset,
            reason,
            value: String::from_utf8_lossy(&record.value).into_owned(),
        };
        let mut line = serde_json::to_vec(&entry).expect("dead letter serializes");
        line.push(b'\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(&line))
            .map_err(|e| AgentError::io(&path, e))
    }
}
