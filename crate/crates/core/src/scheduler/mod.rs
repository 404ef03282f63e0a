//! Batch workload manager adapters.

mod sim;
mod slurm;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NodeSpec, TaskId, TaskSpec};

pub use sim::{ExecRequest, Executor, SimCluster, SimEvent, SimEventKind, DEFAULT_SIM_DURATION_MS, SIM_DURATION_PARAM, SIM_FAIL_PARAM};
pub use slurm::{CommandOutput, CommandRunner, SlurmCli, SystemCommandRunner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Failed | Self::Cancelled)
    }

    /// Whether `self -> next` is an edge of the job state machine.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending, Cancelled) | (Running, Completed) | (Running, Failed) | (Running, Cancelled)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pending => "PENDING",
            Self::Running => "RUNNING",
            Self::Completed => "COMPLETED",
            Self::Failed => "FAILED",
            Self::Cancelled => "CANCELLED",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerJob {
    pub scheduler_job_id: String,
    pub task_id: TaskId,
    pub state: JobState,
    pub submit_time_ms: i64,
    pub start_time_ms: Option<i64>,
    pub end_time_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub nodes: Vec<NodeSpec>,
    pub cpus_free: u64,
    pub gpus_free: u64,
    pub memory_mb_free: u64,
    pub queued_jobs: u64,
    pub running_jobs: u64,
    pub taken_at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("scheduler unreachable: {0}")]
    Unreachable(String),
    #[error("submission rejected: {0}")]
    Rejected(String),
    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {job} reported unrecognized state {raw:?}")]
    UnknownState { job: String, raw: String },
}

impl SchedulerError {
    /// Retriable errors may succeed on a later cycle; the rest never will.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Self::Unreachable(_) | Self::UnknownState { .. })
    }
}

/// A workload manager the cluster agent can feed.
pub trait Scheduler: Send + Sync {
    fn snapshot(&self) -> Result<ClusterSnapshot, SchedulerError>;

    /// Registers a job that runs `command` with `env` once resources allow.
    fn submit(
        &self,
        spec: &TaskSpec,
        command: &str,
        env: &BTreeMap<String, String>,
    ) -> Result<SchedulerJob, SchedulerError>;

    fn job_state(&self, scheduler_job_id: &str) -> Result<SchedulerJob, SchedulerError>;

    /// Cancels a job. Cancelling a finished job returns it unchanged.
    fn cancel(&self, scheduler_job_id: &str) -> Result<SchedulerJob, SchedulerError>;

    /// The most recent job named after `task_id`, if the scheduler has one.
    fn lookup_by_name(&self, task_id: &TaskId) -> Result<Option<SchedulerJob>, SchedulerError>;

    /// The scheduler's notion of the current time.
    fn now_ms(&self) -> i64 {
        crate::clock::now_ms()
    }

    /// Re-associates a job id with its task after the caller restarted.
    fn track(&self, _scheduler_job_id: &str, _task_id: &TaskId, _submit_time_ms: i64) {}
}

/// Maps a Slurm state string to a job state.
pub fn parse_slurm_state(raw: &str) -> Option<JobState> {
    let word = raw
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_end_matches('+');
    Some(match word {
        "PENDING" => JobState::Pending,
        "RUNNING" | "COMPLETING" => JobState::Running,
        "COMPLETED" => JobState::Completed,
        "FAILED" | "NODE_FAIL" | "OUT_OF_MEMORY" => JobState::Failed,
        "CANCELLED" | "TIMEOUT" => JobState::Cancelled,
        _ => return None,
    })
}
