use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

/// Identifier of a single task, unique within a deployment.
///
/// Task ids double as broker record keys, scheduler job names and the
/// directory name holding a task's files, so they may not contain
/// whitespace or path separators.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ModelError::invalid("task_id", "must not be empty"));
        }
        if value.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(ModelError::invalid("task_id", "must not contain whitespace"));
        }
        if value.contains(['/', '\\']) || value == "." || value == ".." {
            return Err(ModelError::invalid(
                "task_id",
                "must be usable as a file name stem",
            ));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TaskId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl AsRef<str> for TaskId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for TaskId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        TaskId::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Resources a task asks the workload manager for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cpus: u32,
    pub gpus: u32,
    pub memory_mb: u64,
}

impl ResourceRequest {
    pub fn new(cpus: u32, gpus: u32, memory_mb: u64) -> Result<Self, ModelError> {
        let request = Self {
            cpus,
            gpus,
            memory_mb,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cpus == 0 {
            return Err(ModelError::invalid("resources.cpus", "must be at least 1"));
        }
        if self.memory_mb == 0 {
            return Err(ModelError::invalid(
                "resources.memory_mb",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

impl Default for ResourceRequest {
    fn default() -> Self {
        Self {
            cpus: 1,
            gpus: 0,
            memory_mb: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AgentKind {
    Cluster,
    Worker,
    Monitor,
    Submitter,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Cluster => "CLUSTER",
            AgentKind::Worker => "WORKER",
            AgentKind::Monitor => "MONITOR",
            AgentKind::Submitter => "SUBMITTER",
        }
    }
}

impl FromStr for AgentKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CLUSTER" => Ok(AgentKind::Cluster),
            "WORKER" => Ok(AgentKind::Worker),
            "MONITOR" => Ok(AgentKind::Monitor),
            "SUBMITTER" => Ok(AgentKind::Submitter),
            other => Err(ModelError::invalid(
                "agent.kind",
                format!("unknown agent kind {other:?}"),
            )),
        }
    }
}

/// Which component emitted a message.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct AgentIdentity {
    pub kind: AgentKind,
    pub name: String,
}

impl AgentIdentity {
    pub fn new(kind: AgentKind, name: impl Into<String>) -> Result<Self, ModelError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ModelError::invalid("agent.name", "must not be empty"));
        }
        Ok(Self { kind, name })
    }

    pub fn cluster(name: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(AgentKind::Cluster, name)
    }

    pub fn worker(name: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(AgentKind::Worker, name)
    }

    /// Parses the `KIND:name` form used in the runner environment.
    pub fn parse_tagged(s: &str) -> Result<Self, ModelError> {
        let (kind, name) = s
            .split_once(':')
            .ok_or_else(|| ModelError::invalid("agent", "expected KIND:name"))?;
        Self::new(kind.parse()?, name)
    }

    pub fn tagged(&self) -> String {
        format!("{}:{}", self.kind.as_str(), self.name)
    }
}

impl fmt::Display for AgentIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.name)
    }
}

impl<'de> Deserialize<'de> for AgentIdentity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            kind: AgentKind,
            name: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        AgentIdentity::new(raw.kind, raw.name).map_err(serde::de::Error::custom)
    }
}
