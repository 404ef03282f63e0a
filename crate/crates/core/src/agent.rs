//! Plumbing shared by the agents and the task runner.

use std::fs;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::broker::{Broker, BrokerError};
use crate::clock;
use crate::model::{
    decode_message, encode_message, AgentIdentity, ErrorEnvelope, ErrorPhase, Message, ModelError,
    StatusKind, StatusUpdate, TaskId, TopicSet,
};
use crate::scheduler::SchedulerError;

/// Environment variable carrying the launching agent's `KIND:name`.
pub const AGENT_ENV: &str = "TASKFABRIC_AGENT";

pub const PARAMS_FILE: &str = "params.json";
pub const PENDING_FILE: &str = "result.pending";
pub const OUTCOME_FILE: &str = "outcome";
pub const STDERR_FILE: &str = "stderr.log";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("simulated crash: {0}")]
    Crashed(&'static str),
}

impl AgentError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        AgentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// The host name, used when no agent name is configured.
pub fn host_name() -> String {
    ["/proc/sys/kernel/hostname", "/etc/hostname"]
        .iter()
        .filter_map(|p| fs::read_to_string(p).ok())
        .map(|s| s.trim().to_string())
        .find(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| "localhost".to_string())
}

/// Quotes `s` for a POSIX shell.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub fn task_dir(workdir: &Path, task_id: &TaskId) -> PathBuf {
    workdir.join(task_id.as_str())
}

/// Records that the runner's terminal message reached the broker.
pub fn mark_outcome(dir: &Path, outcome: &str) -> Result<(), AgentError> {
    let path = dir.join(OUTCOME_FILE);
    fs::write(&path, outcome).map_err(|e| AgentError::io(&path, e))
}

pub fn outcome_recorded(dir: &Path) -> bool {
    dir.join(OUTCOME_FILE).is_file()
}

/// Publishes messages to the topic matching their type, keyed by task id.
#[derive(Clone)]
pub struct Publisher {
    broker: Arc<dyn Broker>,
    topics: TopicSet,
    agent: AgentIdentity,
}

impl Publisher {
    pub fn new(broker: Arc<dyn Broker>, topics: TopicSet, agent: AgentIdentity) -> Self {
        Self {
            broker,
            topics,
            agent,
        }
    }

    pub fn agent(&self) -> &AgentIdentity {
        &self.agent
    }

    pub fn broker(&self) -> &Arc<dyn Broker> {
        &self.broker
    }

    pub fn topics(&self) -> &TopicSet {
        &self.topics
    }

    pub fn send(&self, message: &Message) -> Result<(), AgentError> {
        let topic = match message {
            Message::Task(_) => &self.topics.new,
            Message::Status(_) => &self.topics.jobs,
            Message::Result(_) => &self.topics.done,
            Message::Error(_) => &self.topics.error,
        };
        let bytes = encode_message(message)?;
        self.broker
            .publish(topic, Some(message.task_id().as_str().as_bytes()), &bytes)?;
        Ok(())
    }

    pub fn status_update(&self, task_id: &TaskId, status: StatusKind, job: Option<&str>) -> StatusUpdate {
        let mut update = StatusUpdate::new(task_id.clone(), status, self.agent.clone(), clock::now_ms());
        update.scheduler_job_id = job.map(str::to_string);
        update
    }

    pub fn status(&self, task_id: &TaskId, status: StatusKind, job: Option<&str>) -> Result<(), AgentError> {
        self.send(&self.status_update(task_id, status, job).into())
    }

    /// Publishes a status that nothing depends on; failures are only logged.
    pub fn advisory_status(&self, task_id: &TaskId, status: StatusKind, job: Option<&str>) {
        if let Err(e) = self.status(task_id, status.clone(), job) {
            log::warn!("{task_id}: could not publish {}: {e}", status.as_str());
        }
    }

    pub fn error(
        &self,
        task_id: &TaskId,
        phase: ErrorPhase,
        message: impl Into<String>,
        detail: Option<String>,
    ) -> Result<(), AgentError> {
        let mut envelope = ErrorEnvelope::new(task_id.clone(), self.agent.clone(), phase, message);
        if let Some(detail) = detail {
            envelope = envelope.with_detail(detail);
        }
        self.send(&envelope.into())
    }
}

/// The last `max` bytes of a file, lossily decoded. `None` if it is
/// missing or empty.
pub fn read_tail(path: &Path, max: u64) -> Option<String> {
    let mut file = fs::File::open(path).ok()?;
    let len = file.metadata().ok()?.len();
    file.seek(SeekFrom::Start(len.saturating_sub(max))).ok()?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).ok()?;
    (!raw.is_empty()).then(|| String::from_utf8_lossy(&raw).into_owned())
}

/// Writes messages that could not be published, one encoded message per line.
pub fn spill(path: &Path, messages: &[Message]) -> Result<(), AgentError> {
    let mut out = Vec::new();
    for m in messages {
        out.extend(encode_message(m)?);
        out.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    let write = || -> io::Result<()> {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&out)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| AgentError::io(path, e))
}

/// Publishes and removes a spill file. Returns whether one existed.
pub fn flush_spill(publisher: &Publisher, path: &Path) -> Result<bool, AgentError> {
    let raw = match fs::read(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(AgentError::io(path, e)),
    };
    for line in raw.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        match decode_message(line) {
            Ok(message) => publisher.send(&message)?,
            Err(e) => log::error!("{}: dropping undecodable line: {e}", path.display()),
        }
    }
    fs::remove_file(path).map_err(|e| AgentError::io(path, e))?;
    Ok(true)
}

/// Settles a finished task's leftovers: flushes its spill file, then
/// reports whether the runner's terminal message is known to be out.
pub fn runner_outcome_published(publisher: &Publisher, dir: &Path) -> Result<bool, AgentError> {
    if flush_spill(publisher, &dir.join(PENDING_FILE))? {
        mark_outcome(dir, "flushed")?;
        return Ok(true);
    }
    Ok(outcome_recorded(dir))
}
