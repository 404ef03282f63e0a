//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! nonzero when any of them fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use taskfabric::agent::{shell_quote, Publisher, AGENT_ENV};
use taskfabric::broker::{
    connect, ensure_topics, partition_for_key, range_assign, Broker, BrokerRecord, CommitPosition, ConsumerGroupId,
    InProcBroker, TopicPartition,
};
use taskfabric::cluster_agent::{build_scheduler, compute_admission, ClusterAgent, Failpoint};
use taskfabric::model::{
    decode_message, encode_message, load_config, AgentIdentity, AgentKind, DeploymentConfig, ErrorEnvelope, ErrorPhase,
    Message, NodeSpec, ParamValue, Params, ResourceRequest, ResultEnvelope, StatusKind, StatusUpdate, TaskId, TaskSpec,
    TopicSet,
};
use taskfabric::monitor::{MonitorAgent, MonitorStore, Registry, JOURNAL_FILE};
use taskfabric::runner::{run_task, RunnerOptions};
use taskfabric::scheduler::{
    ClusterSnapshot, JobState, Scheduler, SchedulerError, SimCluster, SimEvent, SimEventKind, SIM_DURATION_PARAM,
    SIM_FAIL_PARAM,
};
use taskfabric::submitter::submit;
use taskfabric::worker_agent::WorkerAgent;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

trait OrFail<T> {
    fn or_fail(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> OrFail<T> for Result<T, E> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "end-to-end completion", end_to_end_completion),
        (2, "lifecycle order", lifecycle_order),
        (3, "timeout enforcement", timeout_enforcement),
        (4, "oversubscription", oversubscription),
        (5, "crash recovery", crash_recovery),
        (6, "fan-out and load balance", fan_out_and_load_balance),
        (7, "broker properties", broker_properties),
        (8, "simulator conservation", simulator_conservation),
        (9, "scaffold smoke test", scaffold_demo),
        (10, "wire format", wire_format),
    ];
    let mut failed = 0;
    for (n, title, check) in criteria {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let text = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {text}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({title}): PASS [{secs:.1}s] {detail}"),
            Err(reason) => {
                failed += 1;
                println!("criterion {n} ({title}): FAIL [{secs:.1}s] {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- helpers

fn task_id(s: impl Into<String>) -> TaskId {
    TaskId::new(s).expect("valid task id")
}

fn matrix_task(id: &str, n: i64, seed: i64, duration_ms: i64, fail: bool) -> TaskSpec {
    let mut params = Params::new()
        .with("n", n)
        .with("seed", seed)
        .with(SIM_DURATION_PARAM, duration_ms);
    if fail {
        params = params.with("fail", true);
    }
    TaskSpec::new(task_id(id), "builtin:matrix")
        .with_resources(ResourceRequest::new(1, 0, 256).unwrap())
        .with_params(params)
}

fn test_config(dir: &Path, prefix: &str) -> DeploymentConfig {
    DeploymentConfig {
        prefix: prefix.into(),
        workdir: dir.join("work"),
        datadir: dir.join("data"),
        poll_interval_s: 0.5,
        agent_name: Some("cluster-a".into()),
        ..DeploymentConfig::default()
    }
}

fn ephemeral(config: &DeploymentConfig) -> Arc<dyn Broker> {
    let broker: Arc<dyn Broker> = Arc::new(InProcBroker::ephemeral());
    ensure_topics(broker.as_ref(), &config.topics()).unwrap();
    broker
}

fn read_all(broker: &dyn Broker, topic: &str) -> Vec<BrokerRecord> {
    let partitions = broker.partition_count(topic).unwrap();
    let mut out = Vec::new();
    for p in 0..partitions {
        let mut from = 0;
        loop {
            let batch = broker.read(topic, p, from, 1000).unwrap();
            let Some(last) = batch.last() else { break };
            from = last.offset + 1;
            out.extend(batch);
        }
    }
    out
}

/// Result and error envelopes on the broker, per task.
fn outcomes_on_broker(broker: &dyn Broker, topics: &TopicSet) -> BTreeMap<TaskId, (usize, usize)> {
    let mut counts: BTreeMap<TaskId, (usize, usize)> = BTreeMap::new();
    for record in read_all(broker, &topics.done).iter().chain(&read_all(broker, &topics.error)) {
        match decode_message(&record.value) {
            Ok(Message::Result(r)) => counts.entry(r.task_id).or_default().0 += 1,
            Ok(Message::Error(e)) => counts.entry(e.task_id).or_default().1 += 1,
            _ => {}
        }
    }
    counts
}

fn terminal_count(registry: &Registry) -> usize {
    registry.tasks().filter(|t| t.is_terminal()).count()
}

// ------------------------------------------------------- 1 and 2: full run

const E2E_TASKS: usize = 200;
const E2E_NODES: usize = 8;
const E2E_CPUS: u32 = 4;
const E2E_WORKER_SLOTS: u32 = 4;
const E2E_LIMIT: Duration = Duration::from_secs(60);

static E2E_REGISTRY: OnceLock<Registry> = OnceLock::new();

fn e2e_failing(i: usize) -> bool {
    i % 20 == 7
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn write_config(root: &Path, name: &str, extra: &[String]) -> Result<DeploymentConfig, String> {
    let runner = shell_quote(env!("CARGO_BIN_EXE_taskfabric-run"));
    let mut lines = vec![
        "prefix = \"e2e\"".to_string(),
        "broker_endpoint = \"inproc:broker\"".to_string(),
        "poll_interval_s = 0.2".to_string(),
        "oversubscribe_slots = 2".to_string(),
        format!("agent_name = {}", toml_str(name)),
        format!("workdir = {}", toml_str(&format!("work/{name}"))),
        "datadir = \"data\"".to_string(),
        format!("runner_command = {}", toml_str(&runner)),
    ];
    lines.extend_from_slice(extra);
    let path = root.join(format!("{name}.toml"));
    fs::write(&path, lines.join("\n")).or_fail("writing config")?;
    load_config(&path, &BTreeMap::new()).or_fail("loading config")
}

fn end_to_end_completion() -> Outcome {
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let mut agents = Vec::new();

    for name in ["cluster-a", "cluster-b"] {
        let nodes: Vec<String> = (0..E2E_NODES)
            .map(|i| format!("sim.node.{i} = \"{name}-n{i},{E2E_CPUS},0,16384\""))
            .collect();
        let config = write_config(root.path(), name, &nodes)?;
        let broker = connect(&config.broker_endpoint).or_fail("broker")?;
        let mut agent = ClusterAgent::start(&config, broker, build_scheduler(&config)).or_fail(name)?;
        let stop = stop.clone();
        agents.push(thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if let Err(e) = agent.run_cycle() {
                    eprintln!("{name}: {e}");
                }
                thread::sleep(Duration::from_millis(200));
            }
            let _ = agent.shutdown();
        }));
    }

    let config = write_config(root.path(), "worker", &[format!("max_worker_slots = {E2E_WORKER_SLOTS}")])?;
    let broker = connect(&config.broker_endpoint).or_fail("broker")?;
    let mut worker = WorkerAgent::start(&config, broker, Some(E2E_WORKER_SLOTS)).or_fail("worker")?;
    {
        let stop = stop.clone();
        agents.push(thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if let Err(e) = worker.run_cycle() {
                    eprintln!("worker: {e}");
                }
                thread::sleep(Duration::from_millis(100));
            }
            let _ = worker.shutdown();
        }));
    }

    let config = write_config(root.path(), "monitor", &[])?;
    let broker = connect(&config.broker_endpoint).or_fail("broker")?;
    let mut monitor = MonitorAgent::start(&config, broker.clone()).or_fail("monitor")?;
    let view = monitor.view();
    let monitor_thread = {
        let stop = stop.clone();
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if let Err(e) = monitor.run_cycle(Duration::from_millis(100)) {
                    eprintln!("monitor: {e}");
                }
            }
            let _ = monitor.drain();
            let registry = monitor.registry().clone();
            let _ = monitor.shutdown();
            registry
        })
    };

    let specs: Vec<TaskSpec> = (0..E2E_TASKS)
        .map(|i| {
            let duration = 200 + (i as i64 * 373) % 1801;
            matrix_task(&format!("e2e-{i:03}"), 8, i as i64, duration, e2e_failing(i))
        })
        .collect();
    let topics = config.topics();
    let report = submit(broker.as_ref(), &topics, &specs, None);
    ensure!(report.submitted.len() == E2E_TASKS, "submitted {} of {E2E_TASKS}", report.submitted.len());

    while terminal_count(&view.load()) < E2E_TASKS && started.elapsed() < E2E_LIMIT {
        thread::sleep(Duration::from_millis(100));
    }
    let elapsed = started.elapsed();
    // let stragglers (duplicates, late statuses) arrive before stopping
    thread::sleep(Duration::from_millis(500));
    stop.store(true, Ordering::SeqCst);
    for handle in agents {
        handle.join().map_err(|_| "agent thread panicked".to_string())?;
    }
    let registry = monitor_thread.join().map_err(|_| "monitor thread panicked".to_string())?;
    let _ = E2E_REGISTRY.set(registry.clone());

    let failures = (0..E2E_TASKS).filter(|i| e2e_failing(*i)).count();
    let done = registry.tasks().filter(|t| t.latest_status == StatusKind::Done).count();
    ensure!(registry.len() == E2E_TASKS, "registry knows {} tasks", registry.len());
    ensure!(
        terminal_count(&registry) == E2E_TASKS,
        "{} of {E2E_TASKS} tasks terminal after {:.1}s",
        terminal_count(&registry),
        elapsed.as_secs_f64()
    );
    ensure!(done == E2E_TASKS - failures, "DONE = {done}, expected {}", E2E_TASKS - failures);

    let on_broker = outcomes_on_broker(broker.as_ref(), &topics);
    for spec in &specs {
        let id = &spec.task_id;
        let (results, errors) = on_broker.get(id).copied().unwrap_or_default();
        ensure!(results + errors == 1, "{id}: {results} results and {errors} errors published");
        let record = registry.get(id).ok_or(format!("{id} missing"))?;
        let terminal: BTreeSet<&StatusKind> =
            record.history.iter().map(|u| &u.status).filter(|s| s.is_terminal()).collect();
        ensure!(
            terminal.iter().all(|s| **s == record.latest_status),
            "{id}: conflicting terminal statuses {terminal:?}"
        );
        ensure!(
            record.result.is_some() != record.error.is_some(),
            "{id}: result {} / error {}",
            record.result.is_some(),
            record.error.is_some()
        );
    }
    ensure!(elapsed < E2E_LIMIT, "took {:.1}s", elapsed.as_secs_f64());
    Ok(format!(
        "{done} DONE + {failures} injected failures of {E2E_TASKS}, one outcome each, all terminal after {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn lifecycle_order() -> Outcome {
    let registry = E2E_REGISTRY.get().ok_or("the end-to-end run produced no registry")?;
    let mut worker_tasks = 0;
    let mut cluster_tasks = 0;
    for record in registry.tasks() {
        let ranks: Vec<u8> = record.history.iter().filter_map(|u| u.status.lifecycle_rank()).collect();
        ensure!(
            ranks.windows(2).all(|w| w[0] < w[1]),
            "{}: core statuses out of order: {:?}",
            record.task_id,
            record.history.iter().map(|u| u.status.as_str()).collect::<Vec<_>>()
        );
        let by_worker = record.history.iter().any(|u| u.agent.kind == AgentKind::Worker);
        if by_worker {
            worker_tasks += 1;
            ensure!(
                ranks.iter().all(|r| *r >= StatusKind::Running.lifecycle_rank().unwrap()),
                "{}: worker task went through queue states",
                record.task_id
            );
        } else {
            cluster_tasks += 1;
        }
    }
    ensure!(worker_tasks > 0 && cluster_tasks > 0, "worker {worker_tasks}, cluster {cluster_tasks}");
    Ok(format!(
        "{} histories without regressions ({cluster_tasks} via clusters, {worker_tasks} via the worker)",
        registry.len()
    ))
}

// ------------------------------------------------------------ 3: timeouts

fn timeout_enforcement() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = test_config(dir.path(), "tmo");
    let broker = ephemeral(&config);
    let sim = Arc::new(SimCluster::new(
        (0..3).map(|i| NodeSpec::new(format!("n{i}"), 4, 0, 16384)).collect(),
    ));
    let mut agent = ClusterAgent::start(&config, broker.clone(), sim.clone()).or_fail("agent")?;
    let specs: Vec<TaskSpec> = (0..10)
        .map(|i| {
            TaskSpec::new(task_id(format!("slow-{i}")), "builtin:sleep")
                .with_timeout(1)
                .with_params(Params::new().with(SIM_DURATION_PARAM, 5000))
        })
        .collect();
    submit(broker.as_ref(), &config.topics(), &specs, None);
    let poll = config.poll_interval_ms();
    let mut submitted = 0;
    for _ in 0..100 {
        submitted += agent.run_cycle().or_fail("cycle")?.submitted.len();
        if submitted == specs.len() && agent.in_flight().count() == 0 {
            break;
        }
        sim.sim_advance(poll);
    }
    ensure!(submitted == specs.len(), "only {submitted} submitted");

    let mut timeouts = BTreeMap::new();
    for record in read_all(broker.as_ref(), &config.topics().error) {
        if let Ok(Message::Error(e)) = decode_message(&record.value) {
            ensure!(e.phase == ErrorPhase::Timeout, "{}: error phase {:?}", e.task_id, e.phase);
            *timeouts.entry(e.task_id).or_insert(0) += 1;
        }
    }
    let log = sim.event_log();
    let mut worst_lag = 0;
    for spec in &specs {
        let id = &spec.task_id;
        ensure!(timeouts.get(id) == Some(&1), "{id}: {:?} TIMEOUT errors", timeouts.get(id));
        let job = sim.lookup_by_name(id).or_fail("lookup")?.ok_or(format!("{id}: no job"))?;
        ensure!(job.state == JobState::Cancelled, "{id}: job is {:?}", job.state);
        let start = job.start_time_ms.ok_or(format!("{id}: never started"))?;
        let cancelled = log
            .iter()
            .find(|e| &e.task_id == id && e.kind == SimEventKind::Cancelled)
            .ok_or(format!("{id}: no cancellation"))?
            .time_ms;
        let lag = cancelled - (start + 1000);
        ensure!(
            (0..=poll as i64).contains(&lag),
            "{id}: cancelled {lag} ms past the deadline (poll interval {poll} ms)"
        );
        worst_lag = worst_lag.max(lag);
    }
    ensure!(
        !log.iter().any(|e| e.kind == SimEventKind::Completed),
        "a job ran to completion"
    );
    Ok(format!("10 TIMEOUT errors, 10 cancelled jobs, worst lag {worst_lag} ms <= {poll} ms"))
}

// ---------------------------------------------------- 4: oversubscription

fn oversubscription() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = test_config(dir.path(), "over");
    let snapshot = ClusterSnapshot {
        nodes: vec![NodeSpec::new("n0", 4, 0, 16384)],
        cpus_free: 4,
        gpus_free: 0,
        memory_mb_free: 16384,
        queued_jobs: 0,
        running_jobs: 0,
        taken_at_ms: 0,
    };
    let one_cpu: Vec<TaskSpec> = (0..10).map(|i| matrix_task(&format!("a-{i}"), 2, i, 1000, false)).collect();
    let admitted = compute_admission(&snapshot, &one_cpu, &[], &config).len();
    ensure!(admitted == 6, "admission picked {admitted}, expected 6");

    let broker = ephemeral(&config);
    let sim = Arc::new(SimCluster::new(vec![NodeSpec::new("n0", 4, 0, 16384)]));
    let mut agent = ClusterAgent::start(&config, broker.clone(), sim.clone()).or_fail("agent")?;
    let total = 20;
    let specs: Vec<TaskSpec> = (0..total).map(|i| matrix_task(&format!("o-{i:02}"), 2, i, 1000, false)).collect();
    submit(broker.as_ref(), &config.topics(), &specs, None);
    let mut handed_over = 0;
    let mut cycles = 0;
    let mut checked = 0;
    while cycles < 200 {
        cycles += 1;
        let report = agent.run_cycle().or_fail("cycle")?;
        if cycles == 1 {
            ensure!(report.submitted.len() == 6, "first cycle submitted {}", report.submitted.len());
        }
        handed_over += report.submitted.len();
        if handed_over < total as usize {
            checked += 1;
            ensure!(
                sim.pending_count() >= 1,
                "cycle {cycles}: {} tasks not yet handed over but nothing pending in the scheduler",
                total as usize - handed_over
            );
        }
        if handed_over == total as usize && agent.in_flight().count() == 0 {
            break;
        }
        sim.sim_advance(config.poll_interval_ms());
    }
    ensure!(handed_over == total as usize, "only {handed_over} handed over");
    Ok(format!("admitted 6 of 10 at 4 free CPUs; queue non-empty at all {checked} cycles with work left"))
}

// ------------------------------------------------------ 5: crash recovery

const CRASH_TASKS: usize = 50;
const CRASH_TRIALS: u64 = 20;

type Finals = BTreeMap<TaskId, (StatusKind, Option<serde_json::Value>)>;

fn crash_specs() -> Vec<TaskSpec> {
    (0..CRASH_TASKS)
        .map(|i| {
            let duration = 200 + (i as i64 * 611) % 1801;
            matrix_task(&format!("c-{i:02}"), 6, i as i64, duration, i % 10 == 3)
        })
        .collect()
}

enum Crash {
    Between,
    At(Failpoint),
}

/// Runs the 50-task workload, crashing the cluster agent once when `crash`
/// is given. Returns the final registry.
fn crash_run(crash: Option<(usize, Crash)>) -> Result<Registry, String> {
    let dir = tempfile::tempdir().unwrap();
    let config = test_config(dir.path(), "crash");
    let broker = ephemeral(&config);
    let executor = {
        let config = config.clone();
        let broker = broker.clone();
        let options = RunnerOptions {
            flush_timeout: Duration::from_secs(1),
            retry_delay: Duration::from_millis(5),
        };
        Box::new(move |req: &taskfabric::scheduler::ExecRequest<'_>| {
            let agent = req
                .env
                .get(AGENT_ENV)
                .and_then(|tag| AgentIdentity::parse_tagged(tag).ok())
                .expect("agent identity in job env");
            run_task(&config, broker.clone(), agent, req.task_id, "builtin:matrix", &options).exit_code()
        })
    };
    let sim = Arc::new(
        SimCluster::new(vec![NodeSpec::new("n0", 4, 0, 16384), NodeSpec::new("n1", 4, 0, 16384)])
            .with_executor(executor),
    );
    let mut monitor = MonitorAgent::start(&config, broker.clone()).or_fail("monitor")?;
    submit(broker.as_ref(), &config.topics(), &crash_specs(), None);
    let mut agent = ClusterAgent::start(&config, broker.clone(), sim.clone()).or_fail("agent")?;
    for cycle in 1..=400 {
        match &crash {
            Some((at, Crash::Between)) if *at == cycle => {
                drop(agent);
                agent = ClusterAgent::start(&config, broker.clone(), sim.clone()).or_fail("restart")?;
            }
            Some((at, Crash::At(failpoint))) if *at == cycle => {
                agent.set_failpoint(Some(*failpoint));
                let _ = agent.run_cycle();
                drop(agent);
                agent = ClusterAgent::start(&config, broker.clone(), sim.clone()).or_fail("restart")?;
            }
            _ => {}
        }
        agent.run_cycle().or_fail("cycle")?;
        sim.sim_advance(config.poll_interval_ms());
        monitor.drain().or_fail("monitor")?;
        let idle = agent.in_flight().count() == 0 && agent.pending_count() == 0;
        if idle && terminal_count(monitor.registry()) == CRASH_TASKS {
            return Ok(monitor.registry().clone());
        }
    }
    Err(format!("only {} tasks terminal", terminal_count(monitor.registry())))
}

fn finals(registry: &Registry) -> Finals {
    registry
        .tasks()
        .map(|t| {
            let result = t.result.as_ref().map(|r| r.result.clone());
            (t.task_id.clone(), (t.latest_status.clone(), result))
        })
        .collect()
}

fn crash_recovery() -> Outcome {
    let baseline = crash_run(None)?;
    let expected = finals(&baseline);
    ensure!(expected.len() == CRASH_TASKS, "baseline has {} tasks", expected.len());
    let mut duplicates = 0;
    for trial in 0..CRASH_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + trial);
        let at = rng.random_range(1..=14);
        let crash = match rng.random_range(0..3) {
            0 => Crash::Between,
            1 => Crash::At(Failpoint::BeforeCommit),
            _ => Crash::At(Failpoint::AfterSubmit),
        };
        let registry = crash_run(Some((at, crash))).map_err(|e| format!("trial {trial}: {e}"))?;
        let got = finals(&registry);
        ensure!(got == expected, "trial {trial}: final registry differs from the crash-free run");
        for record in registry.tasks() {
            let effective = usize::from(record.result.is_some());
            let want = usize::from(record.latest_status == StatusKind::Done);
            ensure!(effective == want, "trial {trial}: {} has {effective} effective results", record.task_id);
        }
        duplicates += registry.duplicate_results_seen();
    }
    Ok(format!(
        "{CRASH_TRIALS} crashed runs match the crash-free registry; duplicate results seen: {duplicates}"
    ))
}

// -------------------------------------------------------- 6: monitor groups

/// Outcome traffic from three agents, interleaved at random, with some
/// results and statuses delivered twice.
fn publish_traffic(broker: Arc<dyn Broker>, topics: &TopicSet, seed: u64, mut between: impl FnMut()) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = [
        AgentIdentity::cluster("cluster-a").unwrap(),
        AgentIdentity::cluster("cluster-b").unwrap(),
        AgentIdentity::worker("ws-01").unwrap(),
    ];
    let publishers: Vec<Publisher> =
        agents.iter().map(|a| Publisher::new(broker.clone(), topics.clone(), a.clone())).collect();
    let mut scripts: Vec<VecDeque<(usize, Message)>> = Vec::new();
    for i in 0..60 {
        let id = task_id(format!("f-{i:02}"));
        let who = i % 3;
        let agent = agents[who].clone();
        let ts = 1_700_000_000_000 + i as i64 * 10;
        let status = |s: StatusKind, dt: i64| Message::Status(StatusUpdate::new(id.clone(), s, agent.clone(), ts + dt));
        let mut script = VecDeque::new();
        if who != 2 {
            script.push_back((who, status(StatusKind::Submitted, 0)));
            script.push_back((who, status(StatusKind::Waiting, 1)));
        }
        script.push_back((who, status(StatusKind::Running, 2)));
        if i % 7 == 0 {
            script.push_back((who, status(StatusKind::Running, 2)));
        }
        if i % 5 == 4 {
            let e = ErrorEnvelope::new(id.clone(), agent.clone(), ErrorPhase::Run, format!("failure {i}"));
            script.push_back((who, Message::Error(e)));
        } else {
            let result = Message::Result(ResultEnvelope {
                task_id: id.clone(),
                agent: agent.clone(),
                result: json!({"value": i}),
                wall_time_s: 0.5,
                timestamp_ms: ts + 3,
            });
            script.push_back((who, result.clone()));
            script.push_back((who, status(StatusKind::Done, 3)));
            if i % 6 == 1 {
                script.push_back((who, result));
            }
        }
        scripts.push(script);
    }
    loop {
        let live: Vec<usize> = (0..scripts.len()).filter(|i| !scripts[*i].is_empty()).collect();
        let Some(&pick) = live.choose(&mut rng) else { break };
        let (who, message) = scripts[pick].pop_front().unwrap();
        publishers[who].send(&message).unwrap();
        if rng.random_range(0..6) == 0 {
            between();
        }
    }
}

fn journal_positions(dir: &Path) -> Result<BTreeSet<(String, u32, u64)>, String> {
    let text = fs::read_to_string(dir.join(JOURNAL_FILE)).or_fail("journal")?;
    text.lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).or_fail("journal line")?;
            Ok((
                v["topic"].as_str().unwrap_or_default().to_string(),
                v["partition"].as_u64().unwrap_or_default() as u32,
                v["offset"].as_u64().unwrap_or_default(),
            ))
        })
        .collect()
}

fn fan_out_and_load_balance() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = test_config(dir.path(), "fan");
    let broker = ephemeral(&base);
    let topics = base.topics();
    let with_datadir = |name: &str| DeploymentConfig {
        datadir: dir.path().join(name),
        ..base.clone()
    };

    // distinct groups: one ingests as records arrive, the other all at once
    let mut eager = MonitorAgent::start_as(&with_datadir("eager"), broker.clone(), "monitors-eager", "m")
        .or_fail("monitor")?;
    let mut lazy =
        MonitorAgent::start_as(&with_datadir("lazy"), broker.clone(), "monitors-lazy", "m").or_fail("monitor")?;
    // one shared group
    let mut left = MonitorAgent::start_as(&with_datadir("left"), broker.clone(), "monitors-shared", "left")
        .or_fail("monitor")?;
    let mut right = MonitorAgent::start_as(&with_datadir("right"), broker.clone(), "monitors-shared", "right")
        .or_fail("monitor")?;

    publish_traffic(broker.clone(), &topics, 6, || {
        eager.run_cycle(Duration::ZERO).unwrap();
        left.run_cycle(Duration::ZERO).unwrap();
    });
    eager.drain().or_fail("drain")?;
    lazy.drain().or_fail("drain")?;
    left.drain().or_fail("drain")?;
    right.drain().or_fail("drain")?;

    ensure!(eager.registry().len() == 60, "eager monitor saw {} tasks", eager.registry().len());
    ensure!(
        eager.snapshot_bytes() == lazy.snapshot_bytes(),
        "snapshots of the two fan-out monitors differ"
    );

    let all: BTreeSet<(String, u32, u64)> = topics
        .outcome_topics()
        .iter()
        .flat_map(|t| read_all(broker.as_ref(), t))
        .map(|r| (r.topic, r.partition, r.offset))
        .collect();
    let l = journal_positions(&dir.path().join("left"))?;
    let r = journal_positions(&dir.path().join("right"))?;
    ensure!(l.is_disjoint(&r), "{} records ingested by both members", l.intersection(&r).count());
    let union: BTreeSet<_> = l.union(&r).cloned().collect();
    ensure!(union == all, "members ingested {} of {} records", union.len(), all.len());
    ensure!(!l.is_empty() && !r.is_empty(), "one member ingested nothing");
    Ok(format!(
        "fan-out snapshots byte-identical ({} bytes); shared group split {} records {}/{}",
        eager.snapshot_bytes().len(),
        all.len(),
        l.len(),
        r.len()
    ))
}

// ----------------------------------------------------- 7: broker properties

const PROPERTY_CASES: u32 = 1000;

fn check_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn key_bytes(k: u8) -> Vec<u8> {
    format!("task-{k}").into_bytes()
}

fn drain_group(broker: &InProcBroker, group: &str, member: &str) -> Result<Vec<BrokerRecord>, TestCaseError> {
    let group = ConsumerGroupId::new(group).map_err(fail)?;
    let sub = broker.subscribe(&group, &["t".to_string()], member).map_err(fail)?;
    let mut out = Vec::new();
    loop {
        let batch = broker.poll(&sub, 7, Duration::ZERO).map_err(fail)?;
        if batch.is_empty() {
            return Ok(out);
        }
        out.extend(batch);
    }
}

fn broker_properties() -> Outcome {
    let ops = || prop::collection::vec((prop::option::of(0u8..6), any::<u32>()), 1..60);

    check_property("per-partition ordering", (1u32..=8, ops()), |(partitions, ops)| {
        let broker = InProcBroker::ephemeral();
        broker.create_topic("t", partitions).map_err(fail)?;
        let mut expected: BTreeMap<u32, Vec<Vec<u8>>> = BTreeMap::new();
        for (i, (key, v)) in ops.iter().enumerate() {
            let value = format!("{i}:{v}").into_bytes();
            let (p, offset) = broker.publish("t", key.map(key_bytes).as_deref(), &value).map_err(fail)?;
            let list = expected.entry(p).or_default();
            prop_assert_eq!(offset, list.len() as u64);
            list.push(value);
        }
        let mut got: BTreeMap<u32, Vec<Vec<u8>>> = BTreeMap::new();
        for record in drain_group(&broker, "g", "m")? {
            let list = got.entry(record.partition).or_default();
            prop_assert_eq!(record.offset, list.len() as u64);
            list.push(record.value);
        }
        prop_assert_eq!(got, expected);
        Ok(())
    })?;

    check_property("same-key colocation", (1u32..=8, ops()), |(partitions, ops)| {
        let broker = InProcBroker::ephemeral();
        broker.create_topic("t", partitions).map_err(fail)?;
        let mut seen: BTreeMap<u8, u32> = BTreeMap::new();
        for (key, v) in &ops {
            let Some(k) = key else {
                broker.publish("t", None, &v.to_le_bytes()).map_err(fail)?;
                continue;
            };
            let (p, _) = broker.publish("t", Some(&key_bytes(*k)), &v.to_le_bytes()).map_err(fail)?;
            prop_assert_eq!(p, partition_for_key(&key_bytes(*k), partitions));
            prop_assert_eq!(*seen.entry(*k).or_insert(p), p);
        }
        Ok(())
    })?;

    check_property(
        "group isolation",
        (1u32..=4, 1usize..40, 0usize..40),
        |(partitions, n, first_take)| {
            let broker = InProcBroker::ephemeral();
            broker.create_topic("t", partitions).map_err(fail)?;
            for i in 0..n {
                broker.publish("t", Some(&key_bytes(i as u8)), &[i as u8]).map_err(fail)?;
            }
            let g1 = ConsumerGroupId::new("g1").map_err(fail)?;
            let sub = broker.subscribe(&g1, &["t".to_string()], "a").map_err(fail)?;
            let taken = broker.poll(&sub, first_take.max(1), Duration::ZERO).map_err(fail)?;
            let mut next: BTreeMap<u32, u64> = BTreeMap::new();
            for r in &taken {
                let e = next.entry(r.partition).or_default();
                *e = (*e).max(r.offset + 1);
            }
            let positions: Vec<CommitPosition> = next
                .iter()
                .map(|(p, o)| CommitPosition {
                    group: g1.clone(),
                    topic: "t".into(),
                    partition: *p,
                    next_offset: *o,
                })
                .collect();
            broker.commit(&sub, &positions).map_err(fail)?;
            let g2 = ConsumerGroupId::new("g2").map_err(fail)?;
            for p in 0..partitions {
                prop_assert_eq!(broker.committed(&g2, "t", p).map_err(fail)?, 0);
            }
            let all = drain_group(&broker, "g2", "b")?;
            prop_assert_eq!(all.len(), n);
            for p in 0..partitions {
                let want = next.get(&p).copied().unwrap_or(0);
                prop_assert_eq!(broker.committed(&g1, "t", p).map_err(fail)?, want);
            }
            Ok(())
        },
    )?;

    check_property(
        "commit monotonicity",
        (1u64..40, prop::collection::vec(0u64..40, 1..20)),
        |(n, targets)| {
            let broker = InProcBroker::ephemeral();
            broker.create_topic("t", 1).map_err(fail)?;
            for i in 0..n {
                broker.publish("t", None, &i.to_le_bytes()).map_err(fail)?;
            }
            let group = ConsumerGroupId::new("g").map_err(fail)?;
            let sub = broker.subscribe(&group, &["t".to_string()], "a").map_err(fail)?;
            let mut high = 0;
            for target in targets {
                let target = target.min(n);
                let pos = CommitPosition {
                    group: group.clone(),
                    topic: "t".into(),
                    partition: 0,
                    next_offset: target,
                };
                broker.commit(&sub, &[pos]).map_err(fail)?;
                high = high.max(target);
                prop_assert_eq!(broker.committed(&group, "t", 0).map_err(fail)?, high);
            }
            broker.unsubscribe(&sub).map_err(fail)?;
            let sub = broker.subscribe(&group, &["t".to_string()], "b").map_err(fail)?;
            let resumed = broker.poll(&sub, 1, Duration::ZERO).map_err(fail)?;
            prop_assert_eq!(resumed.first().map(|r| r.offset), (high < n).then_some(high));
            Ok(())
        },
    )?;

    check_property(
        "rebalance 2/1/1",
        (prop::collection::btree_set("[a-z]{1,8}", 3), any::<u64>()),
        |(names, order)| {
            let mut names: Vec<String> = names.into_iter().collect();
            names.shuffle(&mut ChaCha8Rng::seed_from_u64(order));
            let broker = InProcBroker::ephemeral();
            broker.create_topic("t", 4).map_err(fail)?;
            let group = ConsumerGroupId::new("g").map_err(fail)?;
            let subs: Vec<_> = names
                .iter()
                .map(|m| broker.subscribe(&group, &["t".to_string()], m))
                .collect::<Result<_, _>>()
                .map_err(fail)?;
            let mut sizes = Vec::new();
            let mut covered = BTreeSet::new();
            for sub in &subs {
                let mine = broker.assignment(sub).map_err(fail)?;
                sizes.push(mine.len());
                for tp in mine {
                    prop_assert!(covered.insert(tp), "partition assigned twice");
                }
            }
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            prop_assert_eq!(sizes, vec![2, 1, 1]);
            prop_assert_eq!(covered.len(), 4);
            let all: Vec<TopicPartition> = (0..4).map(|p| TopicPartition::new("t", p)).collect();
            let direct = range_assign(&names, &all);
            for sub in &subs {
                prop_assert_eq!(&broker.assignment(sub).map_err(fail)?, &direct[&sub.member_id]);
            }
            Ok(())
        },
    )?;

    Ok(format!(
        "ordering, colocation, isolation, commit monotonicity, 2/1/1 split: {PROPERTY_CASES} cases each"
    ))
}

// ------------------------------------------------- 8: simulator conservation

const SIM_EVENTS: usize = 1000;

fn sim_nodes() -> Vec<NodeSpec> {
    vec![
        NodeSpec::new("small", 2, 1, 4096),
        NodeSpec::new("wide", 8, 0, 16384),
        NodeSpec::new("gpu", 4, 2, 8192),
    ]
}

struct Submitted {
    request: ResourceRequest,
    duration_ms: i64,
    fail: bool,
}

struct Stream {
    log: Vec<SimEvent>,
    jobs: BTreeMap<u64, Submitted>,
    /// Log length and clock after each advance.
    advances: Vec<(usize, i64)>,
}

/// Drives a seeded random stream of submissions, clock advances and
/// cancellations until the log holds `SIM_EVENTS` events, checking
/// invariants after each operation.
fn random_stream(seed: u64) -> Result<Stream, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = SimCluster::new(sim_nodes());
    let mut jobs = BTreeMap::new();
    let mut advances = Vec::new();
    let mut step = 0;
    while sim.event_log().len() < SIM_EVENTS {
        step += 1;
        match rng.random_range(0..100) {
            0..50 => {
                let request = ResourceRequest::new(
                    rng.random_range(1..=9),
                    rng.random_range(0..=2),
                    rng.random_range(1..=17) * 1024,
                )
                .unwrap();
                let duration_ms = rng.random_range(0..=3000);
                let fail = rng.random_range(0..10) == 0;
                let mut params = Params::new().with(SIM_DURATION_PARAM, duration_ms);
                if fail {
                    params = params.with(SIM_FAIL_PARAM, true);
                }
                let spec = TaskSpec::new(task_id(format!("s{step}")), "x")
                    .with_resources(request)
                    .with_params(params);
                let fits_somewhere = sim_nodes().iter().any(|n| {
                    request.cpus <= n.cpus_total && request.gpus <= n.gpus_total && request.memory_mb <= n.memory_mb_total
                });
                match sim.submit(&spec, "true", &BTreeMap::new()) {
                    Ok(job) => {
                        ensure!(fits_somewhere, "step {step}: accepted a job no node can hold");
                        let id: u64 = job.scheduler_job_id.parse().unwrap();
                        jobs.insert(id, Submitted { request, duration_ms, fail });
                    }
                    Err(SchedulerError::Unsatisfiable(_)) => {
                        ensure!(!fits_somewhere, "step {step}: rejected a job that fits");
                    }
                    Err(e) => return Err(format!("step {step}: {e}")),
                }
            }
            50..85 => {
                sim.sim_advance(rng.random_range(0..=1500));
                advances.push((sim.event_log().len(), sim.now_ms()));
            }
            _ => {
                if let Some(&id) = jobs.keys().nth(rng.random_range(0..jobs.len().max(1))) {
                    sim.cancel(&id.to_string()).or_fail("cancel")?;
                }
            }
        }
        sim.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
    }
    Ok(Stream {
        log: sim.event_log(),
        jobs,
        advances,
    })
}

/// Replays an event log against an independent model of the cluster.
fn replay(log: &[SimEvent], jobs: &BTreeMap<u64, Submitted>, advances: &[(usize, i64)]) -> Result<usize, String> {
    let nodes = sim_nodes();
    let mut free: Vec<(i64, i64, i64)> = nodes
        .iter()
        .map(|n| (i64::from(n.cpus_total), i64::from(n.gpus_total), n.memory_mb_total as i64))
        .collect();
    let fits = |f: &(i64, i64, i64), r: &ResourceRequest| {
        i64::from(r.cpus) <= f.0 && i64::from(r.gpus) <= f.1 && r.memory_mb as i64 <= f.2
    };
    let mut queue: VecDeque<u64> = VecDeque::new();
    let mut running: BTreeMap<u64, (usize, i64)> = BTreeMap::new();
    let mut checkpoints = advances.iter().peekable();
    let mut last_time = i64::MIN;
    let mut starts = 0;
    for (i, event) in log.iter().enumerate() {
        ensure!(event.time_ms >= last_time, "event {i} goes back in time");
        last_time = event.time_ms;
        let job = jobs.get(&event.job_id).ok_or(format!("event {i}: unknown job"))?;
        let r = &job.request;
        match &event.kind {
            SimEventKind::Submitted => queue.push_back(event.job_id),
            SimEventKind::Started { node } => {
                ensure!(queue.front() == Some(&event.job_id), "event {i}: job {} jumped the queue", event.job_id);
                queue.pop_front();
                let n = nodes.iter().position(|x| &x.name == node).ok_or("unknown node")?;
                let first_fit = free.iter().position(|f| fits(f, r));
                ensure!(first_fit == Some(n), "event {i}: started on {node}, first fit is {first_fit:?}");
                free[n].0 -= i64::from(r.cpus);
                free[n].1 -= i64::from(r.gpus);
                free[n].2 -= r.memory_mb as i64;
                running.insert(event.job_id, (n, event.time_ms));
                starts += 1;
            }
            SimEventKind::Completed | SimEventKind::Failed => {
                let (n, start) = running.remove(&event.job_id).ok_or(format!("event {i}: finished without running"))?;
                ensure!(event.time_ms == start + job.duration_ms, "event {i}: wrong finish time");
                ensure!(
                    (event.kind == SimEventKind::Failed) == job.fail,
                    "event {i}: unexpected {:?}",
                    event.kind
                );
                free[n].0 += i64::from(r.cpus);
                free[n].1 += i64::from(r.gpus);
                free[n].2 += r.memory_mb as i64;
            }
            SimEventKind::Cancelled => {
                if let Some((n, _)) = running.remove(&event.job_id) {
                    free[n].0 += i64::from(r.cpus);
                    free[n].1 += i64::from(r.gpus);
                    free[n].2 += r.memory_mb as i64;
                } else {
                    let before = queue.len();
                    queue.retain(|q| *q != event.job_id);
                    ensure!(queue.len() + 1 == before, "event {i}: cancelled an unknown job");
                }
            }
        }
        ensure!(free.iter().all(|f| f.0 >= 0 && f.1 >= 0 && f.2 >= 0), "event {i}: overcommit");
        while let Some(&&(len, now)) = checkpoints.peek() {
            if len != i + 1 {
                break;
            }
            checkpoints.next();
            if let Some(head) = queue.front() {
                ensure!(
                    !free.iter().any(|f| fits(f, &jobs[head].request)),
                    "after event {i}: head job {head} fits but was left waiting"
                );
            }
            for (id, (_, start)) in &running {
                ensure!(start + jobs[id].duration_ms > now, "job {id} overran its duration");
            }
        }
    }
    Ok(starts)
}

fn simulator_conservation() -> Outcome {
    let seed = 0xC0FFEE;
    let Stream { log, jobs, advances } = random_stream(seed)?;
    let starts = replay(&log, &jobs, &advances)?;
    ensure!(random_stream(seed)?.log == log, "replaying seed {seed:#x} gave a different event log");
    ensure!(random_stream(seed + 1)?.log != log, "different seeds gave the same event log");
    Ok(format!(
        "{} events from random operations, {starts} starts checked; replay identical",
        log.len()
    ))
}

// ------------------------------------------------------- 9: scaffold demo

/// Demo checksums for task i (n = 4i, seed = i), i = 1..=6.
const DEMO_CHECKSUMS: [i64; 6] = [1204, 10060, 34560, 85396, 162000, 275864];

/// Sum of the entries of A*B, as the sum over k of column k of A times
/// row k of B.
fn demo_checksum(n: i64, seed: i64) -> i64 {
    let a = |i: i64, j: i64| (3 * i + 5 * j + seed) % 10;
    let b = |i: i64, j: i64| (7 * i + 2 * j + seed) % 10;
    (0..n)
        .map(|k| (0..n).map(|i| a(i, k)).sum::<i64>() * (0..n).map(|j| b(k, j)).sum::<i64>())
        .sum()
}

fn scaffold_demo() -> Outcome {
    for (i, frozen) in DEMO_CHECKSUMS.iter().enumerate() {
        let i = i as i64 + 1;
        ensure!(demo_checksum(4 * i, i) == *frozen, "oracle disagrees with frozen checksum {i}");
    }
    let exe = Path::new(env!("CARGO_BIN_EXE_taskfabric"));
    let tools = exe.parent().ok_or("no tools dir")?;
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    let status = Command::new(exe)
        .arg("scaffold")
        .arg(&demo)
        .args(["--prefix", "demo", "--tools"])
        .arg(tools)
        .stdout(Stdio::null())
        .status()
        .or_fail("scaffold")?;
    ensure!(status.success(), "scaffold exited with {status}");

    let log = fs::File::create(dir.path().join("run-demo.log")).unwrap();
    let mut child = Command::new("sh")
        .arg(demo.join("run-demo.sh"))
        .stdin(Stdio::null())
        .stdout(log.try_clone().unwrap())
        .stderr(log)
        .spawn()
        .or_fail("run-demo.sh")?;
    let deadline = Instant::now() + Duration::from_secs(180);
    let status = loop {
        if let Some(status) = child.try_wait().or_fail("wait")? {
            break status;
        }
        if Instant::now() > deadline {
            let _ = child.kill();
            return Err("demo did not finish within 180 s".into());
        }
        thread::sleep(Duration::from_millis(100));
    };
    let output = fs::read_to_string(dir.path().join("run-demo.log")).unwrap_or_default();
    ensure!(status.success(), "run-demo.sh exited with {status}: {output}");

    let (_, registry) = MonitorStore::open(&demo.join("data"), Default::default()).or_fail("monitor data")?;
    ensure!(registry.len() == DEMO_CHECKSUMS.len(), "monitor knows {} tasks", registry.len());
    for (i, frozen) in DEMO_CHECKSUMS.iter().enumerate() {
        let id = task_id(format!("demo-{}", i + 1));
        let record = registry.get(&id).ok_or(format!("{id} missing"))?;
        ensure!(record.latest_status == StatusKind::Done, "{id} is {}", record.latest_status);
        let result = &record.result.as_ref().ok_or(format!("{id}: no result"))?.result;
        ensure!(result["checksum"] == json!(frozen), "{id}: checksum {} != {frozen}", result["checksum"]);
    }
    Ok(format!("{} demo tasks DONE with matching checksums", DEMO_CHECKSUMS.len()))
}

// ---------------------------------------------------------- 10: wire format

fn golden_exemplars() -> Vec<(&'static str, Message)> {
    let opts = ParamValue::Map(BTreeMap::from([("fast".to_string(), ParamValue::Bool(true))]));
    let task = TaskSpec::new(task_id("batch_000173"), "run_knots.py")
        .with_resources(ResourceRequest::new(4, 1, 16384).unwrap())
        .with_timeout(3600)
        .with_params(
            Params::new()
                .with("input", "structures/batch_000173.tar")
                .with("chunk", 17)
                .with("thresholds", vec![0.5, 0.75])
                .with("opts", opts),
        );
    let status = StatusUpdate::new(
        task_id("batch_000173"),
        StatusKind::Running,
        AgentIdentity::cluster("cluster-a").unwrap(),
        1_700_000_000_123,
    )
    .with_job("4242");
    let result = ResultEnvelope {
        task_id: task_id("O00534"),
        agent: AgentIdentity::worker("ws-01").unwrap(),
        result: json!({"knots": [3, 1], "checksum": 6336}),
        wall_time_s: 12.5,
        timestamp_ms: 1_700_000_001_000,
    };
    let error = ErrorEnvelope::new(
        task_id("O00534"),
        AgentIdentity::cluster("cluster-b").unwrap(),
        ErrorPhase::Run,
        "payload exited with status 1",
    )
    .with_detail("Traceback (most recent call last):\n  ...\nMemoryError\n");
    vec![
        ("task", Message::Task(task)),
        ("status", Message::Status(status)),
        ("result", Message::Result(result)),
        ("error", Message::Error(error)),
    ]
}

fn wire_format() -> Outcome {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (name, message) in golden_exemplars() {
        let expected = fs::read(golden.join(format!("{name}.json"))).or_fail(name)?;
        let encoded = encode_message(&message).or_fail(name)?;
        ensure!(
            encoded == expected,
            "{name}: encoding drifted:\n  got  {}\n  want {}",
            String::from_utf8_lossy(&encoded),
            String::from_utf8_lossy(&expected)
        );
        ensure!(decode_message(&expected).or_fail(name)? == message, "{name}: decode mismatch");
        let mut extended = b"{\"added_later\":{\"nested\":[1,2]},".to_vec();
        extended.extend_from_slice(&expected[1..]);
        ensure!(
            decode_message(&extended).or_fail(name)? == message,
            "{name}: unknown field changed the decoded message"
        );
    }
    Ok("task, status, result and error envelopes byte-exact; unknown fields ignored".into())
}
