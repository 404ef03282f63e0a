//! The monitor's task registry.
//!
//! Ingestion is keyed on broker position, so replaying records that were
//! already applied changes nothing. A task's latest status is the
//! earliest terminal event by broker append time, or failing that the
//! last status update on the status topic. Both rules depend only on
//! which records were ingested, not on how topics interleaved, so
//! monitors fed the same records agree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::broker::BrokerRecord;
use crate::model::{decode_message, DeliveryMode, ErrorEnvelope, Message, ResultEnvelope, StatusKind, StatusUpdate, TaskId};

/// Width of the throughput window.
pub const THROUGHPUT_WINDOW_MS: i64 = 10 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub latest_status: StatusKind,
    pub history: Vec<StatusUpdate>,
    pub result: Option<ResultEnvelope>,
    pub error: Option<ErrorEnvelope>,
    pub first_seen_ms: i64,
    pub last_update_ms: i64,
    pub duplicate_results: u64,
    terminal: Option<TerminalMark>,
}

impl TaskRecord {
    fn new(task_id: TaskId, at_ms: i64) -> Self {
        Self {
            task_id,
            latest_status: StatusKind::Submitted,
            history: Vec::new(),
            result: None,
            error: None,
            first_seen_ms: at_ms,
            last_update_ms: at_ms,
            duplicate_results: 0,
            terminal: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    /// Broker time of the event that made the task terminal.
    pub fn finished_ms(&self) -> Option<i64> {
        self.terminal.as_ref().map(|t| t.at_ms)
    }

    fn offer_terminal(&mut self, mark: TerminalMark) {
        if self.terminal.as_ref().is_none_or(|t| mark.sort_key() < t.sort_key()) {
            self.terminal = Some(mark);
        }
    }

    fn refresh_latest(&mut self) {
        if let Some(t) = &self.terminal {
            self.latest_status = t.status.clone();
        } else if let Some(last) = self.history.last() {
            self.latest_status = last.status.clone();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TerminalMark {
    status: StatusKind,
    at_ms: i64,
    /// Status, result, error: breaks ties between records appended in the
    /// same millisecond.
    source: u8,
    partition: u32,
    offset: u64,
}

impl TerminalMark {
    fn sort_key(&self) -> (i64, u8, u32, u64) {
        (self.at_ms, self.source, self.partition, self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryStats {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
    /// Tasks that ended in ERROR or CANCELLED.
    pub failed: u64,
    pub duplicate_results_seen: u64,
    pub dead_letters: u64,
    pub throughput_per_min: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ingested {
    Applied(TaskId),
    /// The record's position was already applied.
    Replayed,
    /// Undecodable or not an outcome message.
    DeadLetter(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    tasks: BTreeMap<TaskId, TaskRecord>,
    /// Next unapplied offset per topic and partition.
    positions: BTreeMap<String, BTreeMap<u32, u64>>,
    duplicate_results_seen: u64,
    dead_letters: u64,
    #[serde(skip)]
    delivery: DeliveryMode,
}

impl Registry {
    pub fn new(delivery: DeliveryMode) -> Self {
        Self {
            delivery,
            ..Self::default()
        }
    }

    pub fn set_delivery(&mut self, delivery: DeliveryMode) {
        self.delivery = delivery;
    }

    pub fn ingest(&mut self, record: &BrokerRecord) -> Ingested {
        let next = self
            .positions
            .entry(record.topic.clone())
            .or_default()
            .entry(record.partition)
            .or_insert(0);
        if record.offset < *next {
            return Ingested::Replayed;
        }
        *next = record.offset + 1;
        let message = match decode_message(&record.value) {
            Ok(Message::Task(_)) => {
                self.dead_letters += 1;
                return Ingested::DeadLetter("task message on an outcome topic".into());
            }
            Ok(m) => m,
            Err(e) => {
                self.dead_letters += 1;
                return Ingested::DeadLetter(e.to_string());
            }
        };
        let at = record.append_time_ms;
        let id = message.task_id().clone();
        let task = self
            .tasks
            .entry(id.clone())
            .or_insert_with(|| TaskRecord::new(id.clone(), at));
        task.first_seen_ms = task.first_seen_ms.min(at);
        task.last_update_ms = task.last_update_ms.max(at);
        let mark = |status: StatusKind, source: u8| TerminalMark {
            status,
            at_ms: at,
            source,
            partition: record.partition,
            offset: record.offset,
        };
        match message {
            Message::Status(update) => {
                let repeat = self.delivery == DeliveryMode::ExactlyOnceEffective && task.history.contains(&update);
                if update.status.is_terminal() {
                    task.offer_terminal(mark(update.status.clone(), 0));
                }
                if !repeat {
                    task.history.push(update);
                }
            }
            Message::Result(result) => {
                task.offer_terminal(mark(StatusKind::Done, 1));
                if task.result.is_none() {
                    task.result = Some(result);
                } else {
                    task.duplicate_results += 1;
                    self.duplicate_results_seen += 1;
                }
            }
            Message::Error(error) => {
                task.offer_terminal(mark(StatusKind::Error, 2));
                if task.error.is_none() {
                    task.error = Some(error);
                }
            }
            Message::Task(_) => unreachable!("rejected above"),
        }
        task.refresh_latest();
        Ingested::Applied(id)
    }

    pub fn get(&self, task_id: &TaskId) -> Option<&TaskRecord> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn duplicate_results_seen(&self) -> u64 {
        self.duplicate_results_seen
    }

    pub fn position(&self, topic: &str, partition: u32) -> u64 {
        self.positions
            .get(topic)
            .and_then(|p| p.get(&partition))
            .copied()
            .unwrap_or(0)
    }

    pub fn stats(&self, now_ms: i64) -> RegistryStats {
        let mut counts = BTreeMap::new();
        let mut failed = 0;
        let mut recent_done = 0u64;
        for task in self.tasks.values() {
            *counts.entry(task.latest_status.as_str().to_string()).or_insert(0) += 1;
            match task.latest_status {
                StatusKind::Error | StatusKind::Cancelled => failed += 1,
                StatusKind::Done if task.finished_ms().is_some_and(|t| t > now_ms - THROUGHPUT_WINDOW_MS) => {
                    recent_done += 1
                }
                _ => {}
            }
        }
        RegistryStats {
            counts,
            total: self.tasks.len() as u64,
            failed,
            duplicate_results_seen: self.duplicate_results_seen,
            dead_letters: self.dead_letters,
            throughput_per_min: recent_done as f64 * 60_000.0 / THROUGHPUT_WINDOW_MS as f64,
        }
    }

    /// Canonical serialized form, identical for identical registries.
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("registry serializes")
    }

    pub fn from_snapshot_bytes(raw: &[u8], delivery: DeliveryMode) -> Result<Self, serde_json::Error> {
        let mut registry: Registry = serde_json::from_slice(raw)?;
        registry.delivery = delivery;
        Ok(registry)
    }
}
