use std::collections::{BTreeMap, VecDeque};
use std::sync::{Mutex, MutexGuard};

use super::{ClusterSnapshot, JobState, Scheduler, SchedulerError, SchedulerJob};
use crate::clock;
use crate::model::{NodeSpec, ResourceRequest, TaskId, TaskSpec};

/// Param carrying a job's virtual run time in the simulator.
pub const SIM_DURATION_PARAM: &str = "_sim_duration_ms";
/// Param that makes the simulator fail a job instead of running it.
pub const SIM_FAIL_PARAM: &str = "_sim_fail";
pub const DEFAULT_SIM_DURATION_MS: u64 = 1000;

/// What the simulator hands its executor when a job's virtual run ends.
pub struct ExecRequest<'a> {
    pub scheduler_job_id: &'a str,
    pub task_id: &'a TaskId,
    pub command: &'a str,
    pub env: &'a BTreeMap<String, String>,
}

/// Runs a finished job's command and returns its exit code.
pub type Executor = Box<dyn Fn(&ExecRequest<'_>) -> i32 + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEventKind {
    Submitted,
    Started { node: String },
    Completed,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time_ms: i64,
    pub job_id: u64,
    pub task_id: TaskId,
    pub kind: SimEventKind,
}

struct SimJob {
    task_id: TaskId,
    request: ResourceRequest,
    duration_ms: u64,
    fail: bool,
    command: String,
    env: BTreeMap<String, String>,
    state: JobState,
    submit_time_ms: i64,
    start_time_ms: Option<i64>,
    end_time_ms: Option<i64>,
    node: Option<usize>,
}

impl SimJob {
    fn view(&self, id: u64) -> SchedulerJob {
        SchedulerJob {
            scheduler_job_id: id.to_string(),
            task_id: self.task_id.clone(),
            state: self.state,
            submit_time_ms: self.submit_time_ms,
            start_time_ms: self.start_time_ms,
            end_time_ms: self.end_time_ms,
        }
    }

    fn due_ms(&self) -> Option<i64> {
        (self.state == JobState::Running)
            .then(|| self.start_time_ms.unwrap_or(0) + self.duration_ms as i64)
    }
}

struct NodeState {
    spec: NodeSpec,
    cpus_free: u64,
    gpus_free: u64,
    memory_mb_free: u64,
}

impl NodeState {
    fn fits(&self, r: &ResourceRequest) -> bool {
        u64::from(r.cpus) <= self.cpus_free
            && u64::from(r.gpus) <= self.gpus_free
            && r.memory_mb <= self.memory_mb_free
    }

    fn could_ever_fit(&self, r: &ResourceRequest) -> bool {
        r.cpus <= self.spec.cpus_total
            && r.gpus <= self.spec.gpus_total
            && r.memory_mb <= self.spec.memory_mb_total
    }
}

struct SimState {
    nodes: Vec<NodeState>,
    jobs: BTreeMap<u64, SimJob>,
    queue: VecDeque<u64>,
    now_ms: i64,
    next_id: u64,
    log: Vec<SimEvent>,
}

/// Deterministic discrete-event cluster.
///
/// Jobs queue in submission order and start first-fit by node; a job that
/// does not fit blocks everything behind it. Time only moves through
/// [`SimCluster::sim_advance`], unless the cluster was made
/// [`realtime`](SimCluster::realtime), in which case every call first
/// catches the virtual clock up with the wall clock.
pub struct SimCluster {
    state: Mutex<SimState>,
    executor: Option<Executor>,
    realtime: bool,
}

impl SimCluster {
    pub fn new(nodes: Vec<NodeSpec>) -> Self {
        let nodes = nodes
            .into_iter()
            .map(|spec| NodeState {
                cpus_free: u64::from(spec.cpus_total),
                gpus_free: u64::from(spec.gpus_total),
                memory_mb_free: spec.memory_mb_total,
                spec,
            })
            .collect();
        Self {
            state: Mutex::new(SimState {
                nodes,
                jobs: BTreeMap::new(),
                queue: VecDeque::new(),
                now_ms: 0,
                next_id: 1,
                log: Vec::new(),
            }),
            executor: None,
            realtime: false,
        }
    }

    /// Runs `executor` for every job whose virtual run ends; a nonzero
    /// exit code fails the job.
    pub fn with_executor(mut self, executor: Executor) -> Self {
        self.executor = Some(executor);
        self
    }

    /// Drives the virtual clock from the wall clock.
    pub fn realtime(mut self) -> Self {
        self.realtime = true;
        self.state.get_mut().unwrap_or_else(|e| e.into_inner()).now_ms = clock::now_ms();
        self
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if self.realtime {
            let now = clock::now_ms();
            if now > guard.now_ms {
                self.advance_to(&mut guard, now);
            }
        }
        guard
    }

    /// Advances virtual time by `dt_ms`, returning what happened in the
    /// order it happened: releases at an instant precede the starts they allow.
    pub fn sim_advance(&self, dt_ms: u64) -> Vec<SimEvent> {
        let mut st = self.lock();
        let target = st.now_ms + dt_ms as i64;
        self.advance_to(&mut st, target)
    }

    pub fn now_ms(&self) -> i64 {
        self.lock().now_ms
    }

    /// Every event since creation, including submissions and cancellations.
    pub fn event_log(&self) -> Vec<SimEvent> {
        self.lock().log.clone()
    }

    pub fn pending_count(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn jobs(&self) -> Vec<SchedulerJob> {
        self.lock().jobs.iter().map(|(id, j)| j.view(*id)).collect()
    }

    /// Checks resource conservation and the absence of overcommit.
    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.lock();
        let mut held = vec![(0u64, 0u64, 0u64); st.nodes.len()];
        for (id, job) in &st.jobs {
            match (job.state, job.node) {
                (JobState::Running, Some(n)) => {
                    held[n].0 += u64::from(job.request.cpus);
                    held[n].1 += u64::from(job.request.gpus);
                    held[n].2 += job.request.memory_mb;
                }
                (JobState::Running, None) => return Err(format!("job {id} runs nowhere")),
                _ => {}
            }
        }
        for (node, (cpus, gpus, mem)) in st.nodes.iter().zip(held) {
            let s = &node.spec;
            if cpus + node.cpus_free != u64::from(s.cpus_total)
                || gpus + node.gpus_free != u64::from(s.gpus_total)
                || mem + node.memory_mb_free != s.memory_mb_total
            {
                return Err(format!("resources on {} not conserved", s.name));
            }
            if cpus > u64::from(s.cpus_total) || gpus > u64::from(s.gpus_total) || mem > s.memory_mb_total {
                return Err(format!("{} overcommitted", s.name));
            }
        }
        Ok(())
    }

    fn advance_to(&self, st: &mut SimState, target: i64) -> Vec<SimEvent> {
        let mut events = Vec::new();
        loop {
            schedule_pass(st, &mut events);
            let next_due = st.jobs.values().filter_map(SimJob::due_ms).min();
            match next_due {
                Some(due) if due <= target => {
                    st.now_ms = due;
                    let finishing: Vec<u64> = st
                        .jobs
                        .iter()
                        .filter(|(_, j)| j.due_ms() == Some(due))
                        .map(|(id, _)| *id)
                        .collect();
                    for id in finishing {
                        self.finish(st, id, &mut events);
                    }
                }
                _ => break,
            }
        }
        st.now_ms = st.now_ms.max(target);
        st.log.extend(events.iter().cloned());
        events
    }

    fn finish(&self, st: &mut SimState, id: u64, events: &mut Vec<SimEvent>) {
        let now = st.now_ms;
        let job = st.jobs.get_mut(&id).expect("finishing job");
        let ok = !job.fail
            && self.executor.as_ref().is_none_or(|exec| {
                exec(&ExecRequest {
                    scheduler_job_id: &id.to_string(),
                    task_id: &job.task_id,
                    command: &job.command,
                    env: &job.env,
                }) == 0
            });
        job.state = if ok { JobState::Completed } else { JobState::Failed };
        job.end_time_ms = Some(now);
        let task_id = job.task_id.clone();
        release(st, id);
        events.push(SimEvent {
            time_ms: now,
            job_id: id,
            task_id,
            kind: if ok { SimEventKind::Completed } else { SimEventKind::Failed },
        });
    }

    fn job(st: &SimState, scheduler_job_id: &str) -> Result<u64, SchedulerError> {
        scheduler_job_id
            .parse::<u64>()
            .ok()
            .filter(|id| st.jobs.contains_key(id))
            .ok_or_else(|| SchedulerError::UnknownJob(scheduler_job_id.to_string()))
    }
}

fn schedule_pass(st: &mut SimState, events: &mut Vec<SimEvent>) {
    while let Some(&id) = st.queue.front() {
        let request = st.jobs[&id].request;
        let Some(n) = st.nodes.iter().position(|node| node.fits(&request)) else {
            break;
        };
        st.queue.pop_front();
        let node = &mut st.nodes[n];
        node.cpus_free -= u64::from(request.cpus);
        node.gpus_free -= u64::from(request.gpus);
        node.memory_mb_free -= request.memory_mb;
        let node_name = node.spec.name.clone();
        let now = st.now_ms;
        let job = st.jobs.get_mut(&id).expect("queued job");
        job.state = JobState::Running;
        job.start_time_ms = Some(now);
        job.node = Some(n);
        events.push(SimEvent {
            time_ms: now,
            job_id: id,
            task_id: job.task_id.clone(),
            kind: SimEventKind::Started { node: node_name },
        });
    }
}

fn release(st: &mut SimState, id: u64) {
    let job = &st.jobs[&id];
    if let Some(n) = job.node {
        let r = job.request;
        let node = &mut st.nodes[n];
        node.cpus_free += u64::from(r.cpus);
        node.gpus_free += u64::from(r.gpus);
        node.memory_mb_free += r.memory_mb;
    }
}

impl Scheduler for SimCluster {
    fn snapshot(&self) -> Result<ClusterSnapshot, SchedulerError> {
        let st = self.lock();
        let running = st.jobs.values().filter(|j| j.state == JobState::Running).count();
        Ok(ClusterSnapshot {
            nodes: st.nodes.iter().map(|n| n.spec.clone()).collect(),
            cpus_free: st.nodes.iter().map(|n| n.cpus_free).sum(),
            gpus_free: st.nodes.iter().map(|n| n.gpus_free).sum(),
            memory_mb_free: st.nodes.iter().map(|n| n.memory_mb_free).sum(),
            queued_jobs: st.queue.len() as u64,
            running_jobs: running as u64,
            taken_at_ms: st.now_ms,
        })
    }

    fn submit(
        &self,
        spec: &TaskSpec,
        command: &str,
        env: &BTreeMap<String, String>,
    ) -> Result<SchedulerJob, SchedulerError> {
        spec.validate()
            .map_err(|e| SchedulerError::Rejected(e.to_string()))?;
        let duration_ms = match spec.params.get(SIM_DURATION_PARAM) {
            None => DEFAULT_SIM_DURATION_MS,
            Some(v) => v.as_u64().ok_or_else(|| {
                SchedulerError::Rejected(format!("{SIM_DURATION_PARAM} must be a non-negative integer"))
            })?,
        };
        let fail = spec
            .params
            .get(SIM_FAIL_PARAM)
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        let mut st = self.lock();
        let r = spec.resources;
        if !st.nodes.iter().any(|n| n.could_ever_fit(&r)) {
            return Err(SchedulerError::Unsatisfiable(format!(
                "{} cpus, {} gpus, {} MB fits on no node",
                r.cpus, r.gpus, r.memory_mb
            )));
        }
        let id = st.next_id;
        st.next_id += 1;
        let now = st.now_ms;
        let job = SimJob {
            task_id: spec.task_id.clone(),
            request: r,
            duration_ms,
            fail,
            command: command.to_string(),
            env: env.clone(),
            state: JobState::Pending,
            submit_time_ms: now,
            start_time_ms: None,
            end_time_ms: None,
            node: None,
        };
        let view = job.view(id);
        st.jobs.insert(id, job);
        st.queue.push_back(id);
        st.log.push(SimEvent {
            time_ms: now,
            job_id: id,
            task_id: spec.task_id.clone(),
            kind: SimEventKind::Submitted,
        });
        Ok(view)
    }

    fn job_state(&self, scheduler_job_id: &str) -> Result<SchedulerJob, SchedulerError> {
        let st = self.lock();
        let id = Self::job(&st, scheduler_job_id)?;
        Ok(st.jobs[&id].view(id))
    }

    fn cancel(&self, scheduler_job_id: &str) -> Result<SchedulerJob, SchedulerError> {
        let mut st = self.lock();
        let id = Self::job(&st, scheduler_job_id)?;
        let state = st.jobs[&id].state;
        if state.is_terminal() {
            return Ok(st.jobs[&id].view(id));
        }
        if state == JobState::Pending {
            st.queue.retain(|q| *q != id);
        } else {
            release(&mut st, id);
        }
        let now = st.now_ms;
        let job = st.jobs.get_mut(&id).expect("known job");
        job.state = JobState::Cancelled;
        job.end_time_ms = Some(now);
        let view = job.view(id);
        st.log.push(SimEvent {
            time_ms: now,
            job_id: id,
            task_id: view.task_id.clone(),
            kind: SimEventKind::Cancelled,
        });
        Ok(view)
    }

    fn now_ms(&self) -> i64 {
        self.lock().now_ms
    }

    fn lookup_by_name(&self, task_id: &TaskId) -> Result<Option<SchedulerJob>, SchedulerError> {
        let st = self.lock();
        Ok(st
            .jobs
            .iter()
            .rev()
            .find(|(_, j)| &j.task_id == task_id)
            .map(|(id, j)| j.view(*id)))
    }
}
