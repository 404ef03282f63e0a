//! Append-only record of in-flight jobs, replayed when the agent restarts.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::InFlightEntry;
use crate::agent::AgentError;
use crate::model::{StatusKind, TaskId};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum JournalOp {
    Add {
        entry: InFlightEntry,
    },
    Update {
        task_id: TaskId,
        phase: StatusKind,
        #[serde(default)]
        deadline_ms: Option<i64>,
    },
    Remove {
        task_id: TaskId,
    },
}

pub struct InflightJournal {
    path: PathBuf,
    file: File,
}

impl InflightJournal {
    /// Opens the journal, returning the entries it describes. The file is
    /// rewritten to hold just those entries.
    pub fn open(path: &Path) -> Result<(Self, BTreeMap<TaskId, InFlightEntry>), AgentError> {
        let io = |e| AgentError::io(path, e);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let entries = match fs::read_to_string(path) {
            Ok(text) => replay(path, &text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(io(e)),
        };
        let tmp = path.with_extension("journal.tmp");
        let mut compacted = String::new();
        for entry in entries.values() {
            compacted.push_str(&line(&JournalOp::Add { entry: entry.clone() }));
        }
        fs::write(&tmp, compacted).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            entries,
        ))
    }

    fn append(&mut self, op: &JournalOp, sync: bool) -> Result<(), AgentError> {
        let io = |e| AgentError::io(&self.path, e);
        self.file.write_all(line(op).as_bytes()).map_err(io)?;
        if sync {
            self.file.sync_data().map_err(io)?;
        }
        Ok(())
    }

    pub fn add(&mut self, entry: &InFlightEntry) -> Result<(), AgentError> {
        self.append(&JournalOp::Add { entry: entry.clone() }, true)
    }

    pub fn update(&mut self, entry: &InFlightEntry) -> Result<(), AgentError> {
        self.append(
            &JournalOp::Update {
                task_id: entry.spec.task_id.clone(),
                phase: entry.phase.clone(),
                deadline_ms: entry.deadline_ms,
            },
            false,
        )
    }

    pub fn remove(&mut self, task_id: &TaskId) -> Result<(), AgentError> {
        self.append(&JournalOp::Remove { task_id: task_id.clone() }, false)
    }
}

fn line(op: &JournalOp) -> String {
    let mut s = serde_json::to_string(op).expect("journal entries serialize");
    s.push('\n');
    s
}

fn replay(path: &Path, text: &str) -> BTreeMap<TaskId, InFlightEntry> {
    let mut entries = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let op = match serde_json::from_str::<JournalOp>(raw) {
            Ok(op) => op,
            Err(e) => {
                // a crash mid-write leaves a torn last line
                log::warn!("{}:{}: skipping unreadable entry: {e}", path.display(), n + 1);
                continue;
            }
        };
        match op {
            JournalOp::Add { entry } => {
                entries.insert(entry.spec.task_id.clone(), entry);
            }
            JournalOp::Update {
                task_id,
                phase,
                deadline_ms,
            } => {
                if let Some(entry) = entries.get_mut(&task_id) {
                    entry.phase = phase;
                    entry.deadline_ms = deadline_ms;
                }
            }
            JournalOp::Remove { task_id } => {
                entries.remove(&task_id);
            }
        }
    }
    entries
}
