//! Runs one task's payload and reports its outcome to the broker.
//!
//! The payload is either a builtin (`builtin:matrix`, `builtin:sleep`) or
//! an executable invoked as `<script> <params.json>`. An executable can
//! post statuses by printing `TASKFABRIC_STATUS <name>` lines; the rest of
//! its standard output becomes the result, parsed as JSON when possible.

pub mod builtin;

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::agent::{
    flush_spill, mark_outcome, spill, task_dir, AgentError, Publisher, PARAMS_FILE, PENDING_FILE,
};
use crate::broker::Broker;
use crate::clock;
use crate::model::{
    AgentIdentity, DeploymentConfig, ErrorEnvelope, ErrorPhase, Message, Params, ResultEnvelope,
    StatusKind, TaskId,
};

pub use builtin::{matrix_checksum, Lcg};

/// Exit code when the result and DONE were published.
pub const EXIT_DONE: i32 = 0;
/// Exit code when the runner itself published an error.
pub const EXIT_ERROR_REPORTED: i32 = 3;
/// Exit code when the outcome is waiting in the spill file.
pub const EXIT_OUTCOME_PENDING: i32 = 4;

/// Prefix of payload output lines that are status updates.
pub const STATUS_LINE_PREFIX: &str = "TASKFABRIC_STATUS ";

const PUBLISH_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadError {
    pub message: String,
    pub detail: Option<String>,
}

impl PayloadError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            detail: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Done,
    ErrorReported,
    Pending,
}

impl RunOutcome {
    pub fn exit_code(self) -> i32 {
        match self {
            RunOutcome::Done => EXIT_DONE,
            RunOutcome::ErrorReported => EXIT_ERROR_REPORTED,
            RunOutcome::Pending => EXIT_OUTCOME_PENDING,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunnerOptions {
    /// How long to keep retrying the terminal publish before leaving it
    /// in the spill file for an agent to flush.
    pub flush_timeout: Duration,
    pub retry_delay: Duration,
}

impl Default for RunnerOptions {
    fn default() -> Self {
        Self {
            flush_timeout: Duration::from_secs(30),
            retry_delay: Duration::from_millis(100),
        }
    }
}

/// What a payload sees of its task.
pub struct RunContext {
    task_id: TaskId,
    params: Params,
    dir: PathBuf,
    publisher: Publisher,
    retry_delay: Duration,
}

impl RunContext {
    pub fn task_id(&self) -> &TaskId {
        &self.task_id
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn task_dir(&self) -> &Path {
        &self.dir
    }

    /// Publishes a status update. Statuses are advisory: after a few
    /// failed attempts the update is dropped and the payload carries on.
    pub fn post_status(&self, status: StatusKind) -> bool {
        let update: Message = self.publisher.status_update(&self.task_id, status, None).into();
        for attempt in 1..=PUBLISH_ATTEMPTS {
            match self.publisher.send(&update) {
                Ok(()) => return true,
                Err(e) if attempt == PUBLISH_ATTEMPTS => {
                    log::warn!("{}: dropping status update: {e}", self.task_id);
                }
                Err(_) => std::thread::sleep(self.retry_delay * attempt),
            }
        }
        false
    }
}

/// Runs `script` for `task_id` and publishes exactly one terminal outcome.
pub fn run_task(
    config: &DeploymentConfig,
    broker: Arc<dyn Broker>,
    agent: AgentIdentity,
    task_id: &TaskId,
    script: &str,
    options: &RunnerOptions,
) -> RunOutcome {
    let publisher = Publisher::new(broker, config.topics(), agent.clone());
    let dir = task_dir(&config.workdir, task_id);
    let started = Instant::now();
    let outcome = match load_params(&dir) {
        Err(message) => vec![error_message(task_id, &agent, ErrorPhase::Launch, PayloadError::new(message))],
        Ok(params) => {
            let ctx = RunContext {
                task_id: task_id.clone(),
                params,
                dir: dir.clone(),
                publisher: publisher.clone(),
                retry_delay: options.retry_delay,
            };
            let result = match script.strip_prefix("builtin:") {
                Some(name) => match builtin::lookup(name) {
                    Some(payload) => payload(&ctx),
                    None => Err(PayloadError::new(format!("no builtin payload named {name:?}"))),
                },
                None => run_external(&ctx, script),
            };
            match result {
                Ok(value) => vec![
                    ResultEnvelope {
                        task_id: task_id.clone(),
                        agent: agent.clone(),
                        result: value,
                        wall_time_s: started.elapsed().as_secs_f64(),
                        timestamp_ms: clock::now_ms(),
                    }
                    .into(),
                    publisher.status_update(task_id, StatusKind::Done, None).into(),
                ],
                Err(e) => vec![error_message(task_id, &agent, ErrorPhase::Run, e)],
            }
        }
    };
    let done = matches!(outcome.first(), Some(Message::Result(_)));
    match deliver(&publisher, &dir, &outcome, options) {
        Ok(true) => {
            if let Err(e) = mark_outcome(&dir, if done { "done" } else { "error" }) {
                log::warn!("{task_id}: {e}");
            }
            if done {
                RunOutcome::Done
            } else {
                RunOutcome::ErrorReported
            }
        }
        Ok(false) => RunOutcome::Pending,
        Err(e) => {
            log::error!("{task_id}: outcome lost: {e}");
            RunOutcome::Pending
        }
    }
}

fn error_message(task_id: &TaskId, agent: &AgentIdentity, phase: ErrorPhase, e: PayloadError) -> Message {
    let mut envelope = ErrorEnvelope::new(task_id.clone(), agent.clone(), phase, e.message);
    if let Some(detail) = e.detail {
        envelope = envelope.with_detail(detail);
    }
    envelope.into()
}

fn load_params(dir: &Path) -> Result<Params, String> {
    let path = dir.join(PARAMS_FILE);
    let raw = fs::read(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Params::from_json_bytes(&raw).map_err(|e| format!("corrupt {}: {e}", path.display()))
}

/// Publishes the outcome, falling back to the spill file while the broker
/// is unreachable. Returns whether everything reached the broker.
fn deliver(publisher: &Publisher, dir: &Path, messages: &[Message], options: &RunnerOptions) -> Result<bool, AgentError> {
    let mut sent = 0;
    for message in messages {
        if publisher.send(message).is_err() {
            break;
        }
        sent += 1;
    }
    if sent == messages.len() {
        return Ok(true);
    }
    let path = dir.join(PENDING_FILE);
    fs::create_dir_all(dir).map_err(|e| AgentError::io(dir, e))?;
    spill(&path, &messages[sent..])?;
    log::warn!("broker unreachable; outcome spilled to {}", path.display());
    let deadline = Instant::now() + options.flush_timeout;
    loop {
        match flush_spill(publisher, &path) {
            Ok(_) => return Ok(true),
            Err(e) if Instant::now() >= deadline => {
                log::warn!("giving up on flushing {}: {e}", path.display());
                return Ok(false);
            }
            Err(_) => std::thread::sleep(options.retry_delay),
        }
    }
}

fn run_external(ctx: &RunContext, script: &str) -> Result<serde_json::Value, PayloadError> {
    let params_path = ctx.dir.join(PARAMS_FILE);
    let mut child = Command::new(script)
        .arg(&params_path)
        .env("TASKFABRIC_TASK_ID", ctx.task_id.as_str())
        .env("TASKFABRIC_TASK_DIR", &ctx.dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| PayloadError::new(format!("cannot start {script}: {e}")))?;
    let mut stderr_pipe = child.stderr.take().expect("piped stderr");
    let stderr = std::thread::spawn(move || {
        let mut raw = Vec::new();
        let _ = stderr_pipe.read_to_end(&mut raw);
        String::from_utf8_lossy(&raw).into_owned()
    });
    let mut output = String::new();
    for line in BufReader::new(child.stdout.take().expect("piped stdout")).lines() {
        let Ok(line) = line else { break };
        match line.strip_prefix(STATUS_LINE_PREFIX) {
            Some(name) => match StatusKind::parse(name.trim()) {
                Ok(status) => {
                    ctx.post_status(status);
                }
                Err(e) => log::warn!("{}: ignoring status line: {e}", ctx.task_id),
            },
            None => {
                output.push_str(&line);
                output.push('\n');
            }
        }
    }
    let status = child
        .wait()
        .map_err(|e| PayloadError::new(format!("waiting for {script}: {e}")))?;
    let stderr = stderr.join().unwrap_or_default();
    if !status.success() {
        return Err(PayloadError {
            message: format!("{script} exited with {status}"),
            detail: (!stderr.is_empty()).then_some(stderr),
        });
    }
    let text = output.trim();
    Ok(serde_json::from_str(text).unwrap_or_else(|_| serde_json::Value::String(text.to_string())))
}
