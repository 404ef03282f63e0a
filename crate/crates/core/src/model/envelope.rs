use serde::{Deserialize, Serialize};

use super::{AgentIdentity, ErrorPhase, ModelError, Params, ResourceRequest, StatusKind, TaskId};

/// Largest error detail kept on an [`ErrorEnvelope`]; longer text keeps its tail.
pub const MAX_ERROR_DETAIL: usize = 16 * 1024;

/// A unit of work published to the new-tasks topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub script: String,
    pub resources: ResourceRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<u64>,
    #[serde(default)]
    pub params: Params,
}

impl TaskSpec {
    pub fn new(task_id: TaskId, script: impl Into<String>) -> Self {
        Self {
            task_id,
            script: script.into(),
            resources: ResourceRequest::default(),
            timeout_s: None,
            params: Params::new(),
        }
    }

    pub fn with_resources(mut self, resources: ResourceRequest) -> Self {
        self.resources = resources;
        self
    }

    pub fn with_timeout(mut self, timeout_s: u64) -> Self {
        self.timeout_s = Some(timeout_s);
        self
    }

    pub fn with_params(mut self, params: Params) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.script.is_empty() {
            return Err(ModelError::invalid("script", "must not be empty"));
        }
        self.resources.validate()?;
        if self.timeout_s == Some(0) {
            return Err(ModelError::invalid("timeout_s", "must be positive"));
        }
        self.params.validate()
    }

    /// Timeout in seconds, falling back to the deployment default.
    pub fn effective_timeout_s(&self, default_timeout_s: u64) -> u64 {
        self.timeout_s.unwrap_or(default_timeout_s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusUpdate {
    pub task_id: TaskId,
    pub status: StatusKind,
    pub agent: AgentIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler_job_id: Option<String>,
    pub timestamp_ms: i64,
}

impl StatusUpdate {
    pub fn new(task_id: TaskId, status: StatusKind, agent: AgentIdentity, timestamp_ms: i64) -> Self {
        Self {
            task_id,
            status,
            agent,
            scheduler_job_id: None,
            timestamp_ms,
        }
    }

    pub fn with_job(mut self, scheduler_job_id: impl Into<String>) -> Self {
        self.scheduler_job_id = Some(scheduler_job_id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope {
    pub task_id: TaskId,
    pub agent: AgentIdentity,
    pub result: serde_json::Value,
    pub wall_time_s: f64,
    pub timestamp_ms: i64,
}

impl ResultEnvelope {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.wall_time_s.is_finite() && self.wall_time_s >= 0.0) {
            return Err(ModelError::invalid(
                "wall_time_s",
                "must be a non-negative finite number",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub task_id: TaskId,
    pub agent: AgentIdentity,
    pub phase: ErrorPhase,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ErrorEnvelope {
    pub fn new(
        task_id: TaskId,
        agent: AgentIdentity,
        phase: ErrorPhase,
        message: impl Into<String>,
    ) -> Self {
        let mut message = message.into();
        if message.is_empty() {
            message = "unspecified error".to_string();
        }
        Self {
            task_id,
            agent,
            phase,
            message,
            detail: None,
        }
    }

    /// Attaches detail text, keeping at most the last [`MAX_ERROR_DETAIL`] bytes.
    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(tail_of(detail.into(), MAX_ERROR_DETAIL));
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.message.is_empty() {
            return Err(ModelError::invalid("message", "must not be empty"));
        }
        if self.detail.as_ref().is_some_and(|d| d.len() > MAX_ERROR_DETAIL) {
            return Err(ModelError::invalid("detail", "longer than 16 KiB"));
        }
        Ok(())
    }
}

pub(crate) fn tail_of(mut text: String, max: usize) -> String {
    if text.len() <= max {
        return text;
    }
    let mut cut = text.len() - max;
    while !text.is_char_boundary(cut) {
        cut += 1;
    }
    text.split_off(cut)
}

/// Every message that travels over the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Task(TaskSpec),
    Status(StatusUpdate),
    Result(ResultEnvelope),
    Error(ErrorEnvelope),
}

impl Message {
    pub fn task_id(&self) -> &TaskId {
        match self {
            Message::Task(m) => &m.task_id,
            Message::Status(m) => &m.task_id,
            Message::Result(m) => &m.task_id,
            Message::Error(m) => &m.task_id,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Task(_) => "task",
            Message::Status(_) => "status",
            Message::Result(_) => "result",
            Message::Error(_) => "error",
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Message::Task(m) => m.validate(),
            Message::Status(_) => Ok(()),
            Message::Result(m) => m.validate(),
            Message::Error(m) => m.validate(),
        }
    }
}

impl From<TaskSpec> for Message {
    fn from(m: TaskSpec) -> Self {
        Message::Task(m)
    }
}

impl From<StatusUpdate> for Message {
    fn from(m: StatusUpdate) -> Self {
        Message::Status(m)
    }
}

impl From<ResultEnvelope> for Message {
    fn from(m: ResultEnvelope) -> Self {
        Message::Result(m)
    }
}

impl From<ErrorEnvelope> for Message {
    fn from(m: ErrorEnvelope) -> Self {
        Message::Error(m)
    }
}
