//! Feeds a batch workload manager from the new-tasks topic.

mod journal;

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use journal::InflightJournal;

use crate::agent::{self, runner_outcome_published, task_dir, AgentError, Publisher, AGENT_ENV, PARAMS_FILE};
use crate::broker::{
    ensure_topics, Broker, BrokerError, BrokerRecord, ConsumerGroupId, OffsetTracker, Subscription,
    TopicPartition,
};
use crate::model::{
    decode_message, AgentIdentity, DeploymentConfig, ErrorPhase, Message, SchedulerKind, StatusKind, TaskId,
    TaskSpec, DEFAULT_CLUSTER_GROUP,
};
use crate::scheduler::{
    ClusterSnapshot, JobState, Scheduler, SchedulerError, SchedulerJob, SimCluster, SlurmCli, SystemCommandRunner,
};

pub const JOURNAL_FILE: &str = "inflight.journal";

/// Where a consumed task record came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
}

/// A task handed to the scheduler whose outcome is not yet published.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InFlightEntry {
    pub spec: TaskSpec,
    pub scheduler_job_id: String,
    pub phase: StatusKind,
    /// Set once the job is seen running: start plus timeout.
    pub deadline_ms: Option<i64>,
    pub submit_time_ms: i64,
    pub broker_ack: Option<RecordRef>,
}

impl InFlightEntry {
    /// Still waiting in the scheduler queue, as far as the agent last saw.
    pub fn is_queued(&self) -> bool {
        matches!(self.phase, StatusKind::Submitted | StatusKind::Waiting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmissionBudget {
    pub free_slots: u64,
    pub oversubscribe_slots: u64,
    pub in_flight_count: u64,
}

impl AdmissionBudget {
    pub fn allowed(&self) -> u64 {
        (self.free_slots + self.oversubscribe_slots).saturating_sub(self.in_flight_count)
    }
}

/// How many of the leading `pending` tasks fit the free CPUs and GPUs at once.
pub fn free_slots(snapshot: &ClusterSnapshot, pending: &[TaskSpec]) -> u64 {
    let mut cpus = snapshot.cpus_free;
    let mut gpus = snapshot.gpus_free;
    let mut slots = 0;
    for spec in pending {
        let (c, g) = (u64::from(spec.resources.cpus), u64::from(spec.resources.gpus));
        if c > cpus || g > gpus {
            break;
        }
        cpus -= c;
        gpus -= g;
        slots += 1;
    }
    slots
}

/// Picks the tasks to hand the scheduler now: the longest prefix of
/// `pending` that keeps queued jobs within free slots plus headroom.
///
/// Only jobs still queued count against the budget; running jobs already
/// show up as missing free CPUs.
pub fn compute_admission(
    snapshot: &ClusterSnapshot,
    pending: &[TaskSpec],
    in_flight: &[InFlightEntry],
    config: &DeploymentConfig,
) -> Vec<TaskSpec> {
    let budget = AdmissionBudget {
        free_slots: free_slots(snapshot, pending),
        oversubscribe_slots: u64::from(config.oversubscribe_slots),
        in_flight_count: in_flight.iter().filter(|e| e.is_queued()).count() as u64,
    };
    pending.iter().take(budget.allowed() as usize).cloned().collect()
}

/// Test hooks that abort a cycle at a chosen point, as a crash would.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failpoint {
    /// After the scheduler accepted a job, before the journal records it.
    AfterSubmit,
    /// After all work of a cycle, before offsets are committed.
    BeforeCommit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleReport {
    pub submitted: Vec<TaskId>,
    pub adopted: Vec<TaskId>,
    pub status_changes: Vec<(TaskId, StatusKind)>,
    pub timed_out: Vec<TaskId>,
    pub errors: Vec<(TaskId, ErrorPhase)>,
    pub finished: Vec<TaskId>,
}

struct PendingTask {
    spec: TaskSpec,
    tp: TopicPartition,
    offset: u64,
}

enum Launch {
    Done,
    Retry,
}

pub struct ClusterAgent {
    config: DeploymentConfig,
    broker: Arc<dyn Broker>,
    scheduler: Arc<dyn Scheduler>,
    publisher: Publisher,
    group: ConsumerGroupId,
    subscription: Subscription,
    pending: VecDeque<PendingTask>,
    in_flight: BTreeMap<TaskId, InFlightEntry>,
    tracker: OffsetTracker,
    journal: InflightJournal,
    failpoint: Option<Failpoint>,
}

impl ClusterAgent {
    /// Creates the topics if needed, replays the journal and joins the
    /// cluster agents' consumer group.
    pub fn start(
        config: &DeploymentConfig,
        broker: Arc<dyn Broker>,
        scheduler: Arc<dyn Scheduler>,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let name = config.agent_name.clone().unwrap_or_else(agent::host_name);
        let identity = AgentIdentity::cluster(&name)?;
        let topics = config.topics();
        ensure_topics(broker.as_ref(), &topics)?;
        let (journal, in_flight) = InflightJournal::open(&config.workdir.join(JOURNAL_FILE))?;
        for entry in in_flight.values() {
            scheduler.track(&entry.scheduler_job_id, &entry.spec.task_id, entry.submit_time_ms);
        }
        let group = ConsumerGroupId::new(DEFAULT_CLUSTER_GROUP)?;
        let subscription = broker.subscribe(&group, std::slice::from_ref(&topics.new), &identity.tagged())?;
        log::info!("{identity} started with {} jobs in flight", in_flight.len());
        Ok(Self {
            config: config.clone(),
            publisher: Publisher::new(broker.clone(), topics, identity),
            broker,
            scheduler,
            group,
            subscription,
            pending: VecDeque::new(),
            in_flight,
            tracker: OffsetTracker::new(),
            journal,
            failpoint: None,
        })
    }

    pub fn identity(&self) -> &AgentIdentity {
        self.publisher.agent()
    }

    pub fn subscription(&self) -> &Subscription {
        &self.subscription
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &InFlightEntry> {
        self.in_flight.values()
    }

    /// Tasks consumed from the broker but not yet handed to the scheduler.
    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn set_failpoint(&mut self, failpoint: Option<Failpoint>) {
        self.failpoint = failpoint;
    }

    /// Runs one cycle at the scheduler's current time.
    pub fn run_cycle(&mut self) -> Result<CycleReport, AgentError> {
        let now = self.scheduler.now_ms();
        self.run_cycle_at(now)
    }

    /// One pass: reconcile in-flight jobs, enforce timeouts, then take in
    /// and submit as many new tasks as the admission budget allows.
    pub fn run_cycle_at(&mut self, now_ms: i64) -> Result<CycleReport, AgentError> {
        let mut report = CycleReport::default();
        self.reconcile(now_ms, &mut report)?;
        self.timeouts(now_ms, &mut report)?;
        match self.scheduler.snapshot() {
            Ok(snapshot) => {
                self.take_in(&snapshot)?;
                self.admit(&snapshot, &mut report)?;
            }
            Err(e) if e.is_retriable() => log::warn!("snapshot failed, skipping admission: {e}"),
            Err(e) => return Err(e.into()),
        }
        if self.failpoint == Some(Failpoint::BeforeCommit) {
            return Err(AgentError::Crashed("before commit"));
        }
        self.commit()?;
        Ok(report)
    }

    /// Cancels every running job past its deadline. Returns the task ids.
    pub fn enforce_timeouts(&mut self, now_ms: i64) -> Result<Vec<TaskId>, AgentError> {
        let mut report = CycleReport::default();
        self.timeouts(now_ms, &mut report)?;
        Ok(report.timed_out)
    }

    /// Leaves the consumer group. In-flight jobs stay in the journal.
    pub fn shutdown(self) -> Result<(), AgentError> {
        self.broker.unsubscribe(&self.subscription)?;
        Ok(())
    }

    fn reconcile(&mut self, now_ms: i64, report: &mut CycleReport) -> Result<(), AgentError> {
        let ids: Vec<TaskId> = self.in_flight.keys().cloned().collect();
        for id in ids {
            let job_id = self.in_flight[&id].scheduler_job_id.clone();
            match self.scheduler.job_state(&job_id) {
                Ok(job) => self.observe(&id, &job, now_ms, report)?,
                Err(SchedulerError::UnknownJob(_)) => {
                    let msg = format!("scheduler no longer knows job {job_id}");
                    self.publisher.error(&id, ErrorPhase::Internal, msg, None)?;
                    report.errors.push((id.clone(), ErrorPhase::Internal));
                    self.retire(&id, report)?;
                }
                Err(e) if e.is_retriable() => log::warn!("{id}: state of job {job_id} unavailable: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn observe(&mut self, id: &TaskId, job: &SchedulerJob, now_ms: i64, report: &mut CycleReport) -> Result<(), AgentError> {
        let entry = &self.in_flight[id];
        let job_id = job.scheduler_job_id.as_str();
        match job.state {
            JobState::Pending => {
                if entry.phase == StatusKind::Submitted {
                    self.advance_phase(id, StatusKind::Waiting, None, report)?;
                }
            }
            JobState::Running => {
                if entry.phase != StatusKind::Running {
                    let timeout_s = entry.spec.effective_timeout_s(self.config.default_timeout_s);
                    let start = job.start_time_ms.unwrap_or(now_ms);
                    let deadline = start.saturating_add((timeout_s as i64).saturating_mul(1000));
                    self.advance_phase(id, StatusKind::Running, Some(deadline), report)?;
                }
            }
            JobState::Completed => {
                if !self.outcome_published(id)? {
                    log::warn!("{id}: job {job_id} completed but the runner reported nothing");
                }
                self.retire(id, report)?;
            }
            JobState::Failed => {
                if !self.outcome_published(id)? {
                    let phase = if job.start_time_ms.is_some() { ErrorPhase::Run } else { ErrorPhase::Launch };
                    self.publisher.error(id, phase, format!("scheduler job {job_id} failed"), None)?;
                    report.errors.push((id.clone(), phase));
                }
                self.retire(id, report)?;
            }
            JobState::Cancelled => {
                let expired = entry.deadline_ms.is_some_and(|d| now_ms > d);
                if self.outcome_published(id)? {
                    self.retire(id, report)?;
                } else if expired {
                    self.publish_timeout(id, report)?;
                } else {
                    let phase = if job.start_time_ms.is_some() { ErrorPhase::Run } else { ErrorPhase::Launch };
                    let msg = format!("scheduler job {job_id} was cancelled outside the agent");
                    self.publisher.error(id, phase, msg, None)?;
                    self.publisher.status(id, StatusKind::Cancelled, Some(job_id))?;
                    report.errors.push((id.clone(), phase));
                    self.retire(id, report)?;
                }
            }
        }
        Ok(())
    }

    fn outcome_published(&self, id: &TaskId) -> Result<bool, AgentError> {
        runner_outcome_published(&self.publisher, &task_dir(&self.config.workdir, id))
    }

    fn advance_phase(
        &mut self,
        id: &TaskId,
        phase: StatusKind,
        deadline_ms: Option<i64>,
        report: &mut CycleReport,
    ) -> Result<(), AgentError> {
        let entry = self.in_flight.get_mut(id).expect("in-flight task");
        self.publisher
            .advisory_status(id, phase.clone(), Some(&entry.scheduler_job_id));
        entry.phase = phase.clone();
        entry.deadline_ms = deadline_ms;
        self.journal.update(entry)?;
        report.status_changes.push((id.clone(), phase));
        Ok(())
    }

    fn retire(&mut self, id: &TaskId, report: &mut CycleReport) -> Result<(), AgentError> {
        self.in_flight.remove(id);
        self.journal.remove(id)?;
        report.finished.push(id.clone());
        Ok(())
    }

    fn publish_timeout(&mut self, id: &TaskId, report: &mut CycleReport) -> Result<(), AgentError> {
        let entry = &self.in_flight[id];
        let timeout_s = entry.spec.effective_timeout_s(self.config.default_timeout_s);
        let job_id = entry.scheduler_job_id.clone();
        self.publisher.error(
            id,
            ErrorPhase::Timeout,
            format!("exceeded timeout of {timeout_s} s; scheduler job {job_id} cancelled"),
            None,
        )?;
        self.publisher.status(id, StatusKind::Cancelled, Some(&job_id))?;
        report.timed_out.push(id.clone());
        report.errors.push((id.clone(), ErrorPhase::Timeout));
        self.retire(id, report)
    }

    fn timeouts(&mut self, now_ms: i64, report: &mut CycleReport) -> Result<(), AgentError> {
        let expired: Vec<TaskId> = self
            .in_flight
            .values()
            .filter(|e| e.phase == StatusKind::Running && e.deadline_ms.is_some_and(|d| now_ms > d))
            .map(|e| e.spec.task_id.clone())
            .collect();
        for id in expired {
            let job_id = self.in_flight[&id].scheduler_job_id.clone();
            match self.scheduler.cancel(&job_id) {
                Ok(job) if matches!(job.state, JobState::Completed | JobState::Failed) => {
                    // finished before the cancel landed
                    self.observe(&id, &job, now_ms, report)?;
                }
                Ok(_) | Err(SchedulerError::UnknownJob(_)) => self.publish_timeout(&id, report)?,
                Err(e) if e.is_retriable() => log::warn!("{id}: cancel of job {job_id} failed: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn take_in(&mut self, snapshot: &ClusterSnapshot) -> Result<(), AgentError> {
        let queued = self.in_flight.values().filter(|e| e.is_queued()).count() as u64;
        let ceiling = snapshot.cpus_free + u64::from(self.config.oversubscribe_slots);
        let want = ceiling.saturating_sub(queued + self.pending.len() as u64) as usize;
        if want == 0 {
            return self.keep_alive();
        }
        let records = match self.broker.poll(&self.subscription, want, Duration::ZERO) {
            Err(BrokerError::Rebalanced { .. }) => {
                self.refresh_assignment()?;
                self.broker.poll(&self.subscription, want, Duration::ZERO)
            }
            other => other,
        };
        let records = match records {
            Err(BrokerError::NotMember { .. }) => return self.rejoin(),
            other => other?,
        };
        for record in records {
            self.accept(record);
        }
        Ok(())
    }

    fn keep_alive(&mut self) -> Result<(), AgentError> {
        match self.broker.heartbeat(&self.subscription) {
            Err(BrokerError::NotMember { .. }) => self.rejoin(),
            other => Ok(other?),
        }
    }

    fn rejoin(&mut self) -> Result<(), AgentError> {
        log::warn!("{} lost its group membership; rejoining", self.identity());
        self.pending.clear();
        self.tracker.clear();
        self.subscription = self.broker.subscribe(
            &self.group,
            &[self.publisher.topics().new.clone()],
            &self.subscription.member_id,
        )?;
        Ok(())
    }

    fn refresh_assignment(&mut self) -> Result<(), AgentError> {
        let assigned = self.broker.assignment(&self.subscription)?;
        self.pending.retain(|p| assigned.contains(&p.tp));
        self.tracker.retain(&assigned);
        Ok(())
    }

    fn accept(&mut self, record: BrokerRecord) {
        let tp = record.topic_partition();
        self.tracker.track(&tp, record.offset);
        let spec = match decode_message(&record.value) {
            Ok(Message::Task(spec)) => spec,
            Ok(other) => {
                log::warn!("{tp}@{}: ignoring {} message on the new-tasks topic", record.offset, other.type_name());
                self.tracker.settle(&tp, record.offset);
                return;
            }
            Err(e) => {
                log::error!("{tp}@{}: dropping undecodable task: {e}", record.offset);
                self.tracker.settle(&tp, record.offset);
                return;
            }
        };
        let known = self.in_flight.contains_key(&spec.task_id)
            || self.pending.iter().any(|p| p.spec.task_id == spec.task_id);
        if known {
            log::info!("{}: already being handled, skipping redelivery", spec.task_id);
            self.tracker.settle(&tp, record.offset);
            return;
        }
        self.pending.push_back(PendingTask {
            spec,
            tp,
            offset: record.offset,
        });
    }

    fn admit(&mut self, snapshot: &ClusterSnapshot, report: &mut CycleReport) -> Result<(), AgentError> {
        let specs: Vec<TaskSpec> = self.pending.iter().map(|p| p.spec.clone()).collect();
        let in_flight: Vec<InFlightEntry> = self.in_flight.values().cloned().collect();
        let admitted = compute_admission(snapshot, &specs, &in_flight, &self.config).len();
        for _ in 0..admitted {
            let task = self.pending.front().expect("admitted task is pending");
            let (spec, tp, offset) = (task.spec.clone(), task.tp.clone(), task.offset);
            match self.launch(&spec, &tp, offset, report)? {
                Launch::Done => {
                    self.pending.pop_front();
                    self.tracker.settle(&tp, offset);
                }
                Launch::Retry => break,
            }
        }
        Ok(())
    }

    fn launch(&mut self, spec: &TaskSpec, tp: &TopicPartition, offset: u64, report: &mut CycleReport) -> Result<Launch, AgentError> {
        let id = &spec.task_id;
        let ack = Some(RecordRef {
            topic: tp.topic.clone(),
            partition: tp.partition,
            offset,
        });
        match self.scheduler.lookup_by_name(id) {
            Ok(Some(job)) if !matches!(job.state, JobState::Failed | JobState::Cancelled) => {
                log::info!("{id}: adopting existing scheduler job {}", job.scheduler_job_id);
                let entry = InFlightEntry {
                    spec: spec.clone(),
                    scheduler_job_id: job.scheduler_job_id,
                    phase: StatusKind::Submitted,
                    deadline_ms: None,
                    submit_time_ms: job.submit_time_ms,
                    broker_ack: ack,
                };
                self.journal.add(&entry)?;
                self.in_flight.insert(id.clone(), entry);
                report.adopted.push(id.clone());
                return Ok(Launch::Done);
            }
            Ok(_) => {}
            Err(e) if e.is_retriable() => {
                log::warn!("{id}: job lookup failed, retrying later: {e}");
                return Ok(Launch::Retry);
            }
            Err(e) => return Err(e.into()),
        }
        let dir = task_dir(&self.config.workdir, id);
        if let Err(e) = write_params(&dir, spec) {
            self.publisher.error(id, ErrorPhase::Launch, e.to_string(), None)?;
            report.errors.push((id.clone(), ErrorPhase::Launch));
            return Ok(Launch::Done);
        }
        let env = BTreeMap::from([(AGENT_ENV.to_string(), self.identity().tagged())]);
        let command = runner_command(&self.config, spec);
        match self.scheduler.submit(spec, &command, &env) {
            Ok(job) => {
                if self.failpoint == Some(Failpoint::AfterSubmit) {
                    return Err(AgentError::Crashed("after submit"));
                }
                self.publisher
                    .advisory_status(id, StatusKind::Submitted, Some(&job.scheduler_job_id));
                let entry = InFlightEntry {
                    spec: spec.clone(),
                    scheduler_job_id: job.scheduler_job_id,
                    phase: StatusKind::Submitted,
                    deadline_ms: None,
                    submit_time_ms: job.submit_time_ms,
                    broker_ack: ack,
                };
                self.journal.add(&entry)?;
                self.in_flight.insert(id.clone(), entry);
                report.submitted.push(id.clone());
                report.status_changes.push((id.clone(), StatusKind::Submitted));
                Ok(Launch::Done)
            }
            Err(e) if e.is_retriable() => {
                log::warn!("{id}: submit failed, retrying later: {e}");
                Ok(Launch::Retry)
            }
            Err(e) => {
                self.publisher.error(id, ErrorPhase::Submit, e.to_string(), None)?;
                report.errors.push((id.clone(), ErrorPhase::Submit));
                Ok(Launch::Done)
            }
        }
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

/// Writes the task's parameter file where the runner expects it.
pub fn write_params(dir: &std::path::Path, spec: &TaskSpec) -> Result<(), AgentError> {
    fs::create_dir_all(dir).map_err(|e| AgentError::io(dir, e))?;
    let path = dir.join(PARAMS_FILE);
    let bytes = spec.params.to_canonical_json()?;
    fs::write(&path, bytes).map_err(|e| AgentError::io(&path, e))
}

/// The shell command that launches the runner for `spec`.
pub fn runner_command(config: &DeploymentConfig, spec: &TaskSpec) -> String {
    let mut cmd = config.runner_command.clone();
    if let Some(source) = &config.source {
        cmd.push_str(&format!(" --config {}", agent::shell_quote(&source.to_string_lossy())));
    }
    cmd.push_str(&format!(
        " --task-id {} --script {}",
        agent::shell_quote(spec.task_id.as_str()),
        agent::shell_quote(&spec.script)
    ));
    cmd
}

/// The scheduler a deployment config asks for.
///
/// The simulator follows the wall clock and runs each job's command
/// through `sh -c` when the job's virtual run ends.
pub fn build_scheduler(config: &DeploymentConfig) -> Arc<dyn Scheduler> {
    match config.effective_scheduler() {
        SchedulerKind::Sim => Arc::new(
            SimCluster::new(config.sim_nodes.clone())
                .realtime()
                .with_executor(Box::new(|req| {
                    let status = Command::new("sh").arg("-c").arg(req.command).envs(req.env).status();
                    match status {
                        Ok(s) => s.code().unwrap_or(1),
                        Err(e) => {
                            log::error!("{}: cannot run job {}: {e}", req.task_id, req.scheduler_job_id);
                            127
                        }
                    }
                })),
        ),
        SchedulerKind::Slurm => Arc::new(SlurmCli::new(
            Box::new(SystemCommandRunner),
            config.workdir.clone(),
            config.slurm_gpus,
            Duration::from_secs_f64(config.command_timeout_s),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeSpec, ResourceRequest};

    fn snapshot(cpus_free: u64, gpus_free: u64) -> ClusterSnapshot {
        ClusterSnapshot {
            nodes: vec![NodeSpec::new("n0", 64, 8, 1 << 20)],
            cpus_free,
            gpus_free,
            memory_mb_free: 1 << 20,
            queued_jobs: 0,
            running_jobs: 0,
            taken_at_ms: 0,
        }
    }

    fn specs(n: usize, cpus: u32, gpus: u32) -> Vec<TaskSpec> {
        (0..n)
            .map(|i| {
                TaskSpec::new(TaskId::new(format!("t{i}")).unwrap(), "builtin:sleep")
                    .with_resources(ResourceRequest::new(cpus, gpus, 512).unwrap())
            })
            .collect()
    }

    fn queued(n: usize) -> Vec<InFlightEntry> {
        specs(n, 1, 0)
            .into_iter()
            .map(|spec| InFlightEntry {
                scheduler_job_id: spec.task_id.to_string(),
                spec,
                phase: StatusKind::Submitted,
                deadline_ms: None,
                submit_time_ms: 0,
                broker_ack: None,
            })
            .collect()
    }

    fn config(overs: u32) -> DeploymentConfig {
        DeploymentConfig {
            oversubscribe_slots: overs,
            ..DeploymentConfig::default()
        }
    }

    #[test]
    fn four_free_plus_two_headroom_admits_six() {
        let got = compute_admission(&snapshot(4, 0), &specs(10, 1, 0), &[], &config(2));
        let ids: Vec<String> = got.iter().map(|s| s.task_id.to_string()).collect();
        assert_eq!(ids, ["t0", "t1", "t2", "t3", "t4", "t5"]);
    }

    #[test]
    fn exhausted_budget_admits_nothing() {
        assert!(compute_admission(&snapshot(0, 0), &specs(5, 1, 0), &queued(2), &config(2)).is_empty());
        assert!(compute_admission(&snapshot(4, 0), &[], &[], &config(2)).is_empty());
    }

    #[test]
    fn running_jobs_do_not_count_against_headroom() {
        let mut running = queued(3);
        for e in &mut running {
            e.phase = StatusKind::Running;
        }
        assert_eq!(compute_admission(&snapshot(0, 0), &specs(5, 1, 0), &running, &config(2)).len(), 2);
    }

    #[test]
    fn gpu_requests_limit_slots() {
        assert_eq!(free_slots(&snapshot(16, 2), &specs(5, 1, 1)), 2);
        assert_eq!(compute_admission(&snapshot(16, 2), &specs(5, 1, 1), &[], &config(1)).len(), 3);
    }

    #[test]
    fn heterogeneous_requests_fit_first_fit_prefix() {
        let mut pending = specs(3, 2, 0);
        pending[1].resources.cpus = 8;
        // 2 fits, 8 does not: the prefix stops there
        assert_eq!(free_slots(&snapshot(6, 0), &pending), 1);
    }

    #[test]
    fn runner_command_quotes_arguments() {
        let cfg = DeploymentConfig {
            source: Some("/etc/task fabric.toml".into()),
            ..DeploymentConfig::default()
        };
        let spec = TaskSpec::new(TaskId::new("t-1").unwrap(), "./run.py");
        assert_eq!(
            runner_command(&cfg, &spec),
            "taskfabric-run --config '/etc/task fabric.toml' --task-id 't-1' --script './run.py'"
        );
    }
}
