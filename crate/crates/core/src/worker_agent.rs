//! Runs tasks from the new-tasks topic directly on this machine.
//!
//! Each task runs the task runner as a child process bound to one slot.
//! The runner publishes the result; the agent publishes RUNNING, reaps
//! children, and reports crashes, launch failures and timeouts.

use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{
    self, read_tail, runner_outcome_published, task_dir, AgentError, Publisher, AGENT_ENV, STDERR_FILE,
};
use crate::broker::{ensure_topics, Broker, BrokerError, BrokerRecord, ConsumerGroupId, OffsetTracker, Subscription, TopicPartition};
use crate::clock;
use crate::cluster_agent::{runner_command, write_params};
use crate::model::{
    decode_message, AgentIdentity, DeploymentConfig, ErrorPhase, Message, StatusKind, TaskId, TaskSpec,
    MAX_ERROR_DETAIL,
};

/// Observable state of one execution slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSlotState {
    pub slot_index: u32,
    pub occupant: Option<TaskId>,
    pub started_ms: Option<i64>,
    pub deadline_ms: Option<i64>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct WorkerReport {
    pub started: Vec<TaskId>,
    pub finished: Vec<TaskId>,
    pub timed_out: Vec<TaskId>,
    pub errors: Vec<(TaskId, ErrorPhase)>,
}

struct Running {
    spec: TaskSpec,
    child: Child,
    /// Exit status once reaped, kept while its report is still unpublished.
    exited: Option<ExitStatus>,
    timed_out: bool,
    started_ms: i64,
    deadline_ms: i64,
    tp: TopicPartition,
    offset: u64,
}

pub struct WorkerAgent {
    config: DeploymentConfig,
    broker: Arc<dyn Broker>,
    publisher: Publisher,
    group: ConsumerGroupId,
    subscription: Subscription,
    slots: Vec<Option<Running>>,
    tracker: OffsetTracker,
}

impl WorkerAgent {
    /// Joins the worker group with `slots` execution slots (the configured
    /// maximum when `None`).
    pub fn start(config: &DeploymentConfig, broker: Arc<dyn Broker>, slots: Option<u32>) -> Result<Self, AgentError> {
        config.validate()?;
        let name = config.agent_name.clone().unwrap_or_else(agent::host_name);
        let identity = AgentIdentity::worker(&name)?;
        let topics = config.topics();
        ensure_topics(broker.as_ref(), &topics)?;
        let group = ConsumerGroupId::new(&config.worker_group)?;
        let subscription = broker.subscribe(&group, std::slice::from_ref(&topics.new), &identity.tagged())?;
        let slots = slots.unwrap_or(config.max_worker_slots).max(1) as usize;
        log::info!("{identity} started with {slots} slots");
        Ok(Self {
            config: config.clone(),
            publisher: Publisher::new(broker.clone(), topics, identity),
            broker,
            group,
            subscription,
            slots: (0..slots).map(|_| None).collect(),
            tracker: OffsetTracker::new(),
        })
    }

    pub fn identity(&self) -> &AgentIdentity {
        self.publisher.agent()
    }

    pub fn subscription(&self) -> &Subscription {
        &self.subscription
    }

    pub fn capacity(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    pub fn occupied(&self) -> usize {
        self.slots.len() - self.capacity()
    }

    pub fn slot_states(&self) -> Vec<WorkerSlotState> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, slot)| WorkerSlotState {
                slot_index: i as u32,
                occupant: slot.as_ref().map(|r| r.spec.task_id.clone()),
                started_ms: slot.as_ref().map(|r| r.started_ms),
                deadline_ms: slot.as_ref().map(|r| r.deadline_ms),
            })
            .collect()
    }

    pub fn run_cycle(&mut self) -> Result<WorkerReport, AgentError> {
        self.run_cycle_at(clock::now_ms())
    }

    /// One pass: reap finished children, kill overdue ones, then start
    /// as many new tasks as there are free slots.
    pub fn run_cycle_at(&mut self, now_ms: i64) -> Result<WorkerReport, AgentError> {
        let mut report = WorkerReport::default();
        for index in 0..self.slots.len() {
            self.check_slot(index, now_ms, &mut report)?;
        }
        self.take_in(now_ms, &mut report)?;
        self.commit()?;
        Ok(report)
    }

    /// Kills running children and leaves the group. Their tasks will be
    /// redelivered to another member.
    pub fn shutdown(mut self) -> Result<(), AgentError> {
        for running in self.slots.iter_mut().flatten() {
            if running.exited.is_none() {
                kill_group(&mut running.child);
            }
        }
        self.broker.unsubscribe(&self.subscription)?;
        Ok(())
    }

    fn check_slot(&mut self, index: usize, now_ms: i64, report: &mut WorkerReport) -> Result<(), AgentError> {
        let Some(running) = self.slots[index].as_mut() else {
            return Ok(());
        };
        if running.exited.is_none() {
            running.exited = running
                .child
                .try_wait()
                .map_err(|e| AgentError::io(&PathBuf::from("<child>"), e))?;
        }
        if running.exited.is_none() && now_ms >= running.deadline_ms {
            kill_group(&mut running.child);
            running.exited = Some(
                running
                    .child
                    .wait()
                    .map_err(|e| AgentError::io(&PathBuf::from("<child>"), e))?,
            );
            running.timed_out = true;
        }
        let Some(status) = running.exited else {
            return Ok(());
        };
        let id = running.spec.task_id.clone();
        match self.report_exit(index, status) {
            Ok(Some(phase)) => {
                report.errors.push((id.clone(), phase));
                if phase == ErrorPhase::Timeout {
                    report.timed_out.push(id.clone());
                }
            }
            Ok(None) => {}
            Err(AgentError::Broker(e)) if e.is_retriable() => {
                log::warn!("{id}: outcome not published yet: {e}");
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        let running = self.slots[index].take().expect("occupied slot");
        self.tracker.settle(&running.tp, running.offset);
        report.finished.push(id);
        Ok(())
    }

    /// Publishes whatever the runner could not. Returns the error phase
    /// published by the agent, if any.
    fn report_exit(&self, index: usize, status: ExitStatus) -> Result<Option<ErrorPhase>, AgentError> {
        let running = self.slots[index].as_ref().expect("occupied slot");
        let id = &running.spec.task_id;
        let dir = task_dir(&self.config.workdir, id);
        if runner_outcome_published(&self.publisher, &dir)? {
            return Ok(None);
        }
        if running.timed_out {
            let timeout = running.spec.effective_timeout_s(self.config.default_timeout_s);
            self.publisher
                .error(id, ErrorPhase::Timeout, format!("killed after exceeding its {timeout} s timeout"), None)?;
            self.publisher.advisory_status(id, StatusKind::Cancelled, None);
            return Ok(Some(ErrorPhase::Timeout));
        }
        let detail = read_tail(&dir.join(STDERR_FILE), MAX_ERROR_DETAIL as u64);
        self.publisher
            .error(id, ErrorPhase::Run, format!("runner exited with {status} without reporting an outcome"), detail)?;
        Ok(Some(ErrorPhase::Run))
    }

    fn take_in(&mut self, now_ms: i64, report: &mut WorkerReport) -> Result<(), AgentError> {
        let free = self.capacity();
        if free == 0 {
            return self.keep_alive();
        }
        let records = match self.broker.poll(&self.subscription, free, Duration::ZERO) {
            Err(BrokerError::Rebalanced { .. }) => {
                self.refresh_assignment()?;
                self.broker.poll(&self.subscription, free, Duration::ZERO)
            }
            other => other,
        };
        let records = match records {
            Err(BrokerError::NotMember { .. }) => return self.rejoin(),
            other => other?,
        };
        for record in records {
            self.accept(record, now_ms, report)?;
        }
        Ok(())
    }

    fn accept(&mut self, record: BrokerRecord, now_ms: i64, report: &mut WorkerReport) -> Result<(), AgentError> {
        let tp = record.topic_partition();
        self.tracker.track(&tp, record.offset);
        let spec = match decode_message(&record.value) {
            Ok(Message::Task(spec)) => spec,
            Ok(other) => {
                log::warn!("{tp}@{}: ignoring {} message on the new-tasks topic", record.offset, other.type_name());
                self.tracker.settle(&tp, record.offset);
                return Ok(());
            }
            Err(e) => {
                log::error!("{tp}@{}: dropping undecodable task: {e}", record.offset);
                self.tracker.settle(&tp, record.offset);
                return Ok(());
            }
        };
        let busy = self.slots.iter().flatten().any(|r| r.spec.task_id == spec.task_id);
        if busy {
            log::info!("{}: already running, skipping redelivery", spec.task_id);
            self.tracker.settle(&tp, record.offset);
            return Ok(());
        }
        let id = spec.task_id.clone();
        match self.launch(&spec) {
            Ok(child) => {
                let timeout_ms = spec.effective_timeout_s(self.config.default_timeout_s).saturating_mul(1000);
                let slot = self.slots.iter().position(Option::is_none).expect("polled within capacity");
                self.slots[slot] = Some(Running {
                    spec,
                    child,
                    exited: None,
                    timed_out: false,
                    started_ms: now_ms,
                    deadline_ms: now_ms.saturating_add(timeout_ms as i64),
                    tp,
                    offset: record.offset,
                });
                report.started.push(id);
            }
            Err(e) => {
                log::error!("{id}: launch failed: {e}");
                self.publisher.error(&id, ErrorPhase::Launch, e.to_string(), None)?;
                self.tracker.settle(&tp, record.offset);
                report.errors.push((id, ErrorPhase::Launch));
            }
        }
        Ok(())
    }

    fn launch(&self, spec: &TaskSpec) -> Result<Child, AgentError> {
        let dir = task_dir(&self.config.workdir, &spec.task_id);
        // Leftovers from an earlier attempt would make the new one look finished.
        for stale in [agent::OUTCOME_FILE, agent::PENDING_FILE] {
            let _ = fs::remove_file(dir.join(stale));
        }
        write_params(&dir, spec)?;
        self.publisher.status(&spec.task_id, StatusKind::Running, None)?;
        let stderr_path = dir.join(STDERR_FILE);
        let stderr = File::create(&stderr_path).map_err(|e| AgentError::io(&stderr_path, e))?;
        let command = format!("exec {}", runner_command(&self.config, spec));
        Command::new("sh")
            .arg("-c")
            .arg(&command)
            .env(AGENT_ENV, self.identity().tagged())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr)
            .process_group(0)
            .spawn()
            .map_err(|e| AgentError::io(&PathBuf::from("sh"), e))
    }

    fn keep_alive(&mut self) -> Result<(), AgentError> {
        match self.broker.heartbeat(&self.subscription) {
            Err(BrokerError::NotMember { .. }) => self.rejoin(),
            other => Ok(other?),
        }
    }

    fn refresh_assignment(&mut self) -> Result<(), AgentError> {
        let assigned = self.broker.assignment(&self.subscription)?;
        self.tracker.retain(&assigned);
        Ok(())
    }

    fn rejoin(&mut self) -> Result<(), AgentError> {
        log::warn!("{} lost its group membership; rejoining", self.identity());
        self.tracker.clear();
        self.subscription = self.broker.subscribe(
            &self.group,
            &[self.publisher.topics().new.clone()],
            &self.subscription.member_id,
        )?;
        Ok(())
    }

    fn commit(&mut self) -> Result<(), AgentError> {
        let positions = self.tracker.ready_commits(&self.group);
        if positions.is_empty() {
            return Ok(());
        }
        match self.broker.commit(&self.subscription, &positions) {
            Ok(()) => self.tracker.mark_committed(&positions),
            Err(BrokerError::NotAssigned(_)) | Err(BrokerError::Rebalanced { .. }) => self.refresh_assignment()?,
            Err(BrokerError::NotMember { .. }) => self.rejoin()?,
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }
}

/// Kills the child and everything it started.
fn kill_group(child: &mut Child) {
    let pgid = format!("-{}", child.id());
    let killed = Command::new("kill")
        .args(["-KILL", "--", &pgid])
        .stderr(Stdio::null())
        .status()
        .is_ok_and(|s| s.success());
    if !killed {
        let _ = child.kill();
    }
}
