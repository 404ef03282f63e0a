use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{parse_slurm_state, ClusterSnapshot, JobState, Scheduler, SchedulerError, SchedulerJob};
use crate::agent::shell_quote;
use crate::clock;
use crate::model::{NodeSpec, ResourceRequest, TaskId, TaskSpec};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutput {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs external programs. Swapped for a scripted fake in tests.
pub trait CommandRunner: Send + Sync {
    /// `Err` means the program could not be started or did not finish in time.
    fn run(&self, program: &str, args: &[String], timeout: Duration) -> Result<CommandOutput, String>;
}

pub struct SystemCommandRunner;

impl CommandRunner for SystemCommandRunner {
    fn run(&self, program: &str, args: &[String], timeout: Duration) -> Result<CommandOutput, String> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("{program}: {e}"))?;
        let drain = |pipe: Option<Box<dyn Read + Send>>| {
            std::thread::spawn(move || {
                let mut out = String::new();
                if let Some(mut pipe) = pipe {
                    let mut raw = Vec::new();
                    let _ = pipe.read_to_end(&mut raw);
                    out = String::from_utf8_lossy(&raw).into_owned();
                }
                out
            })
        };
        let stdout = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
        let stderr = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
        let deadline = Instant::now() + timeout;
        let status = loop {
            match child.try_wait().map_err(|e| e.to_string())? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("{program} timed out after {timeout:?}"));
                }
                None => std::thread::sleep(Duration::from_millis(10)),
            }
        };
        Ok(CommandOutput {
            status: status.code().unwrap_or(-1),
            stdout: stdout.join().unwrap_or_default(),
            stderr: stderr.join().unwrap_or_default(),
        })
    }
}

struct Tracked {
    task_id: TaskId,
    request: Option<ResourceRequest>,
    state: JobState,
    submit_time_ms: i64,
    start_time_ms: Option<i64>,
    end_time_ms: Option<i64>,
}

impl Tracked {
    fn view(&self, id: &str) -> SchedulerJob {
        SchedulerJob {
            scheduler_job_id: id.to_string(),
            task_id: self.task_id.clone(),
            state: self.state,
            submit_time_ms: self.submit_time_ms,
            start_time_ms: self.start_time_ms,
            end_time_ms: self.end_time_ms,
        }
    }

    /// Folds an observed state in, keeping terminal states absorbing.
    fn observe(&mut self, seen: JobState, now: i64) {
        if self.state.is_terminal() || seen == self.state {
            return;
        }
        if seen == JobState::Pending {
            return;
        }
        if matches!(seen, JobState::Running | JobState::Completed | JobState::Failed) && self.start_time_ms.is_none() {
            self.start_time_ms = Some(now);
        }
        if seen.is_terminal() {
            self.end_time_ms = Some(now);
        }
        self.state = seen;
    }
}

/// Drives Slurm through `sbatch`, `squeue`, `sacct`, `scancel` and `sinfo`.
pub struct SlurmCli {
    runner: Box<dyn CommandRunner>,
    workdir: PathBuf,
    gpus_total: u32,
    timeout: Duration,
    jobs: Mutex<BTreeMap<String, Tracked>>,
}

impl SlurmCli {
    /// `gpus_total` is the cluster's GPU count, which `sinfo`'s default
    /// columns do not report.
    pub fn new(runner: Box<dyn CommandRunner>, workdir: impl Into<PathBuf>, gpus_total: u32, timeout: Duration) -> Self {
        Self {
            runner,
            workdir: workdir.into(),
            gpus_total,
            timeout,
            jobs: Mutex::new(BTreeMap::new()),
        }
    }

    fn exec(&self, program: &str, args: &[&str]) -> Result<CommandOutput, SchedulerError> {
        let args: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        log::debug!("{program} {}", args.join(" "));
        self.runner
            .run(program, &args, self.timeout)
            .map_err(SchedulerError::Unreachable)
    }

    fn tracked(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Tracked>> {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Current Slurm state of a job, `None` if Slurm has no record of it.
    fn query_state(&self, id: &str) -> Result<Option<JobState>, SchedulerError> {
        let out = self.exec("squeue", &["-h", "-j", id, "-o", "%T"])?;
        if out.status == 0 {
            if let Some(line) = first_line(&out.stdout) {
                return parse_state(id, line).map(Some);
            }
        } else if !mentions_invalid_job(&out.stderr) {
            return Err(SchedulerError::Unreachable(format!("squeue: {}", out.stderr.trim())));
        }
        let out = self.exec("sacct", &["-n", "-j", id, "-o", "State"])?;
        if out.status != 0 {
            return Err(SchedulerError::Unreachable(format!("sacct: {}", out.stderr.trim())));
        }
        first_line(&out.stdout).map(|line| parse_state(id, line)).transpose()
    }

    fn write_wrapper(&self, task_id: &TaskId, command: &str, env: &BTreeMap<String, String>) -> Result<PathBuf, SchedulerError> {
        let dir = self.workdir.join(task_id.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| SchedulerError::Rejected(format!("{}: {e}", dir.display())))?;
        let mut script = String::from("#!/bin/sh\n");
        for (key, value) in env {
            script.push_str(&format!("export {key}={}\n", shell_quote(value)));
        }
        script.push_str(&format!("exec {command}\n"));
        let path = dir.join("job.sh");
        std::fs::write(&path, script).map_err(|e| SchedulerError::Rejected(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    fn remember(&self, id: &str, task_id: &TaskId, request: Option<ResourceRequest>, state: JobState, submit_time_ms: i64) -> SchedulerJob {
        let now = clock::now_ms();
        let mut jobs = self.tracked();
        let entry = jobs.entry(id.to_string()).or_insert_with(|| Tracked {
            task_id: task_id.clone(),
            request,
            state: JobState::Pending,
            submit_time_ms,
            start_time_ms: None,
            end_time_ms: None,
        });
        entry.observe(state, now);
        entry.view(id)
    }
}

impl Scheduler for SlurmCli {
    fn snapshot(&self) -> Result<ClusterSnapshot, SchedulerError> {
        let out = self.exec("sinfo", &["-h", "-o", "%n %c %m"])?;
        if out.status != 0 {
            return Err(SchedulerError::Unreachable(format!("sinfo: {}", out.stderr.trim())));
        }
        let mut seen = BTreeSet::new();
        let mut nodes = Vec::new();
        for line in out.stdout.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, cpus, mem, ..] = fields[..] else { continue };
            if !seen.insert(name.to_string()) {
                continue;
            }
            let (Some(cpus), Some(mem)) = (leading_number(cpus), leading_number(mem)) else {
                continue;
            };
            let gpus = if nodes.is_empty() { self.gpus_total } else { 0 };
            nodes.push(NodeSpec::new(name, cpus as u32, gpus, mem));
        }
        let out = self.exec("squeue", &["-h", "-o", "%T"])?;
        if out.status != 0 {
            return Err(SchedulerError::Unreachable(format!("squeue: {}", out.stderr.trim())));
        }
        let mut queued = 0;
        let mut running = 0;
        for line in out.stdout.lines() {
            match parse_slurm_state(line) {
                Some(JobState::Pending) => queued += 1,
                Some(JobState::Running) => running += 1,
                _ => {}
            }
        }
        let (mut cpus_held, mut gpus_held, mut mem_held) = (0u64, 0u64, 0u64);
        for job in self.tracked().values() {
            if let (JobState::Running, Some(r)) = (job.state, job.request) {
                cpus_held += u64::from(r.cpus);
                gpus_held += u64::from(r.gpus);
                mem_held += r.memory_mb;
            }
        }
        let cpus: u64 = nodes.iter().map(|n| u64::from(n.cpus_total)).sum();
        let mem: u64 = nodes.iter().map(|n| n.memory_mb_total).sum();
        Ok(ClusterSnapshot {
            cpus_free: cpus.saturating_sub(cpus_held),
            gpus_free: u64::from(self.gpus_total).saturating_sub(gpus_held),
            memory_mb_free: mem.saturating_sub(mem_held),
            queued_jobs: queued,
            running_jobs: running,
            taken_at_ms: clock::now_ms(),
            nodes,
        })
    }

    fn submit(
        &self,
        spec: &TaskSpec,
        command: &str,
        env: &BTreeMap<String, String>,
    ) -> Result<SchedulerJob, SchedulerError> {
        spec.validate().map_err(|e| SchedulerError::Rejected(e.to_string()))?;
        let wrapper = self.write_wrapper(&spec.task_id, command, env)?;
        let r = spec.resources;
        let name = format!("--job-name={}", spec.task_id);
        let cpus = format!("--cpus-per-task={}", r.cpus);
        let mem = format!("--mem={}M", r.memory_mb);
        let gpus = format!("--gpus={}", r.gpus);
        let wrapper = wrapper.to_string_lossy().into_owned();
        let mut args = vec!["--parsable", &name, &cpus, &mem];
        if r.gpus > 0 {
            args.push(&gpus);
        }
        args.push(&wrapper);
        let out = self.exec("sbatch", &args)?;
        if out.status != 0 {
            return Err(classify_submit_failure(&out.stderr));
        }
        let id = first_line(&out.stdout)
            .map(|line| line.split(';').next().unwrap_or("").trim().to_string())
            .filter(|id| !id.is_empty())
            .ok_or_else(|| SchedulerError::Unreachable("sbatch printed no job id".into()))?;
        Ok(self.remember(&id, &spec.task_id, Some(r), JobState::Pending, clock::now_ms()))
    }

    fn job_state(&self, scheduler_job_id: &str) -> Result<SchedulerJob, SchedulerError> {
        let id = scheduler_job_id;
        if !self.tracked().contains_key(id) {
            return Err(SchedulerError::UnknownJob(id.to_string()));
        }
        let state = self
            .query_state(id)?
            .ok_or_else(|| SchedulerError::UnknownJob(id.to_string()))?;
        let mut jobs = self.tracked();
        let job = jobs.get_mut(id).expect("tracked job");
        job.observe(state, clock::now_ms());
        Ok(job.view(id))
    }

    fn cancel(&self, scheduler_job_id: &str) -> Result<SchedulerJob, SchedulerError> {
        let current = self.job_state(scheduler_job_id)?;
        if current.state.is_terminal() {
            return Ok(current);
        }
        let out = self.exec("scancel", &[scheduler_job_id])?;
        if out.status != 0 {
            if mentions_invalid_job(&out.stderr) || out.stderr.contains("already completing or completed") {
                return self.job_state(scheduler_job_id);
            }
            return Err(SchedulerError::Unreachable(format!("scancel: {}", out.stderr.trim())));
        }
        let mut jobs = self.tracked();
        let job = jobs.get_mut(scheduler_job_id).expect("tracked job");
        job.observe(JobState::Cancelled, clock::now_ms());
        Ok(job.view(scheduler_job_id))
    }

    fn lookup_by_name(&self, task_id: &TaskId) -> Result<Option<SchedulerJob>, SchedulerError> {
        let name = task_id.as_str();
        let out = self.exec("squeue", &["-h", "-n", name, "-o", "%i %T"])?;
        if out.status != 0 {
            return Err(SchedulerError::Unreachable(format!("squeue: {}", out.stderr.trim())));
        }
        let mut found = last_id_state(&out.stdout);
        if found.is_none() {
            let name_arg = format!("--name={name}");
            let out = self.exec("sacct", &["-n", "-X", &name_arg, "-o", "JobID,State"])?;
            if out.status != 0 {
                return Err(SchedulerError::Unreachable(format!("sacct: {}", out.stderr.trim())));
            }
            found = last_id_state(&out.stdout);
        }
        let Some((id, raw)) = found else { return Ok(None) };
        let state = parse_state(&id, &raw)?;
        Ok(Some(self.remember(&id, task_id, None, state, clock::now_ms())))
    }

    fn track(&self, scheduler_job_id: &str, task_id: &TaskId, submit_time_ms: i64) {
        self.tracked().entry(scheduler_job_id.to_string()).or_insert_with(|| Tracked {
            task_id: task_id.clone(),
            request: None,
            state: JobState::Pending,
            submit_time_ms,
            start_time_ms: None,
            end_time_ms: None,
        });
    }
}

fn first_line(s: &str) -> Option<&str> {
    s.lines().map(str::trim).find(|l| !l.is_empty())
}

fn last_id_state(s: &str) -> Option<(String, String)> {
    s.lines()
        .filter_map(|line| {
            let mut fields = line.split_whitespace();
            Some((fields.next()?.to_string(), fields.collect::<Vec<_>>().join(" ")))
        })
        .rfind(|(_, state)| !state.is_empty())
}

fn parse_state(id: &str, raw: &str) -> Result<JobState, SchedulerError> {
    parse_slurm_state(raw).ok_or_else(|| SchedulerError::UnknownState {
        job: id.to_string(),
        raw: raw.trim().to_string(),
    })
}

fn leading_number(s: &str) -> Option<u64> {
    let digits: String = s.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn mentions_invalid_job(stderr: &str) -> bool {
    stderr.to_ascii_lowercase().contains("invalid job id")
}

fn classify_submit_failure(stderr: &str) -> SchedulerError {
    let msg = stderr.trim().to_string();
    let lower = msg.to_ascii_lowercase();
    let transient = ["unable to contact", "timed out", "connection refused", "try again", "temporarily"];
    let unsatisfiable = [
        "requested node configuration is not available",
        "more processors requested than permitted",
        "memory specification can not be satisfied",
        "gres",
    ];
    if transient.iter().any(|t| lower.contains(t)) {
        SchedulerError::Unreachable(msg)
    } else if unsatisfiable.iter().any(|t| lower.contains(t)) {
        SchedulerError::Unsatisfiable(msg)
    } else if lower.contains("batch job submission failed") || lower.contains("invalid") {
        SchedulerError::Rejected(msg)
    } else {
        SchedulerError::Unreachable(msg)
    }
}
