use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use taskfabric::agent::AgentError;
use taskfabric::broker::{connect, ensure_topics, Broker};
use taskfabric::cluster_agent::{build_scheduler, ClusterAgent};
use taskfabric::model::{load_config, DeploymentConfig, ResourceRequest, TaskId, TaskSpec};
use taskfabric::monitor::{serve, MonitorAgent, RegistryStats, ADDR_FILE};
use taskfabric::submitter::{self, load_manifest, monitor_url, params_from_args, DoneOracle, HttpDoneOracle};
use taskfabric::worker_agent::WorkerAgent;

#[derive(Parser)]
#[command(name = "taskfabric", version, about = "Broker-mediated task orchestration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Deployment config file.
    #[arg(long, env = "TASKFABRIC_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set poll_interval_s=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Feeds a batch workload manager from the new-tasks topic.
    ClusterAgent {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        name: Option<String>,
        /// Run a single cycle and exit.
        #[arg(long)]
        once: bool,
    },
    /// Runs tasks directly on this machine.
    WorkerAgent {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        slots: Option<u32>,
        #[arg(long)]
        once: bool,
    },
    /// Collects outcomes and serves the REST API.
    Monitor {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        name: Option<String>,
        /// Consumer group; monitors in distinct groups each see every record.
        #[arg(long)]
        group: Option<String>,
    },
    /// Publishes tasks.
    Submit(SubmitArgs),
    /// Generates a runnable demo project.
    Scaffold {
        dir: PathBuf,
        #[arg(long)]
        prefix: String,
        /// Directory holding the taskfabric executables; defaults to this
        /// executable's directory.
        #[arg(long)]
        tools: Option<PathBuf>,
    },
    /// Prints monitor statistics.
    Stats {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        monitor_url: Option<String>,
        /// Wait until this many tasks are finished; exit nonzero unless
        /// all of them are DONE.
        #[arg(long)]
        wait_for: Option<u64>,
        /// Seconds to wait.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
}

#[derive(Args)]
struct SubmitArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// JSON list of task specs.
    #[arg(long, conflicts_with_all = ["task_id", "script"])]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    task_id: Option<String>,
    #[arg(long, required_unless_present = "manifest")]
    script: Option<String>,
    #[arg(long, default_value_t = 1)]
    cpus: u32,
    #[arg(long, default_value_t = 0)]
    gpus: u32,
    /// Memory in MB.
    #[arg(long, default_value_t = 1024)]
    mem: u64,
    /// Timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Skip tasks the monitor already reports DONE.
    #[arg(long)]
    skip_if_done: bool,
    #[arg(long)]
    monitor_url: Option<String>,
}

fn load(args: &ConfigArgs) -> Result<DeploymentConfig, String> {
    let mut overrides = BTreeMap::new();
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("--set {item:?} is not KEY=VALUE"))?;
        overrides.insert(k.to_string(), v.to_string());
    }
    match &args.config {
        Some(path) => load_config(path, &overrides).map_err(|e| e.to_string()),
        None => DeploymentConfig::from_sources(None, None, &overrides).map_err(|e| e.to_string()),
    }
}

fn broker_for(config: &DeploymentConfig) -> Result<Arc<dyn Broker>, String> {
    if config.broker_endpoint == "inproc:" {
        log::warn!("inproc: without a directory is private to this process");
    }
    connect(&config.broker_endpoint).map_err(|e| e.to_string())
}

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install signal handler: {e}");
    }
    stop
}

/// Sleeps for `total` unless asked to stop.
fn pause(stop: &AtomicBool, total: Duration) {
    let until = Instant::now() + total;
    while !stop.load(Ordering::SeqCst) && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(50).min(until - Instant::now()));
    }
}

/// Logs recoverable cycle errors; returns the rest.
fn tolerate(result: Result<(), AgentError>) -> Result<(), String> {
    match result {
        Err(AgentError::Broker(e)) if e.is_retriable() => {
            log::warn!("cycle failed, will retry: {e}");
            Ok(())
        }
        Err(AgentError::Scheduler(e)) if e.is_retriable() => {
            log::warn!("cycle failed, will retry: {e}");
            Ok(())
        }
        Err(e) => Err(e.to_string()),
        Ok(()) => Ok(()),
    }
}

fn cluster_agent(args: ConfigArgs, name: Option<String>, once: bool) -> Result<(), String> {
    let mut config = load(&args)?;
    if name.is_some() {
        config.agent_name = name;
    }
    let broker = broker_for(&config)?;
    let scheduler = build_scheduler(&config);
    let mut agent = ClusterAgent::start(&config, broker, scheduler).map_err(|e| e.to_string())?;
    let stop = stop_flag();
    loop {
        tolerate(agent.run_cycle().map(|report| {
            if !report.submitted.is_empty() || !report.errors.is_empty() {
                log::info!("submitted {}, errors {}", report.submitted.len(), report.errors.len());
            }
        }))?;
        if once || stop.load(Ordering::SeqCst) {
            break;
        }
        pause(&stop, Duration::from_millis(config.poll_interval_ms()));
    }
    agent.shutdown().map_err(|e| e.to_string())
}

fn worker_agent(args: ConfigArgs, name: Option<String>, slots: Option<u32>, once: bool) -> Result<(), String> {
    let mut config = load(&args)?;
    if name.is_some() {
        config.agent_name = name;
    }
    let broker = broker_for(&config)?;
    let mut agent = WorkerAgent::start(&config, broker, slots).map_err(|e| e.to_string())?;
    let stop = stop_flag();
    // Children are reaped more often than the broker is polled for work.
    let tick = Duration::from_millis(config.poll_interval_ms().min(200));
    loop {
        tolerate(agent.run_cycle().map(|_| ()))?;
        if once || stop.load(Ordering::SeqCst) {
            break;
        }
        pause(&stop, tick);
    }
    agent.shutdown().map_err(|e| e.to_string())
}

fn monitor(args: ConfigArgs, port: Option<u16>, name: Option<String>, group: Option<String>) -> Result<(), String> {
    let mut config = load(&args)?;
    if name.is_some() {
        config.agent_name = name;
    }
    if let Some(group) = group {
        config.monitor_group = group;
    }
    let port = port.unwrap_or(config.monitor_http_port);
    let broker = broker_for(&config)?;
    let mut agent = MonitorAgent::start(&config, broker).map_err(|e| e.to_string())?;
    let server = serve(agent.view(), SocketAddr::from(([0, 0, 0, 0], port))).map_err(|e| e.to_string())?;
    let addr_file = config.datadir.join(ADDR_FILE);
    let local = SocketAddr::from(([127, 0, 0, 1], server.local_addr().port()));
    fs::write(&addr_file, local.to_string()).map_err(|e| format!("{}: {e}", addr_file.display()))?;
    log::info!("monitor listening on {}", server.local_addr());
    let stop = stop_flag();
    let wait = Duration::from_millis(config.poll_interval_ms().min(500));
    let mut result = Ok(());
    while !stop.load(Ordering::SeqCst) {
        if let Err(e) = tolerate(agent.run_cycle(wait).map(|_| ())) {
            result = Err(e);
            break;
        }
    }
    let _ = fs::remove_file(&addr_file);
    drop(server);
    result?;
    agent.shutdown().map_err(|e| e.to_string())
}

fn submit(args: SubmitArgs) -> Result<(), String> {
    let config = load(&args.config)?;
    let specs = match &args.manifest {
        Some(path) => load_manifest(path)?,
        None => {
            let id = TaskId::new(args.task_id.clone().expect("required by clap")).map_err(|e| e.to_string())?;
            let resources = ResourceRequest::new(args.cpus, args.gpus, args.mem).map_err(|e| e.to_string())?;
            let mut spec = TaskSpec::new(id, args.script.clone().expect("required by clap"))
                .with_resources(resources)
                .with_params(params_from_args(&args.params)?);
            if let Some(t) = args.timeout {
                spec = spec.with_timeout(t);
            }
            spec.validate().map_err(|e| e.to_string())?;
            vec![spec]
        }
    };
    let broker = broker_for(&config)?;
    let topics = config.topics();
    ensure_topics(broker.as_ref(), &topics).map_err(|e| e.to_string())?;
    let oracle = if args.skip_if_done {
        match args.monitor_url.clone().or_else(|| monitor_url(&config)) {
            Some(url) => Some(HttpDoneOracle::new(url)),
            None => {
                log::warn!("no monitor address known; not checking for finished tasks");
                None
            }
        }
    } else {
        None
    };
    let report = submitter::submit(broker.as_ref(), &topics, &specs, oracle.as_ref().map(|o| o as &dyn DoneOracle));
    for id in &report.submitted {
        println!("submitted {id}");
    }
    for (id, reason) in &report.skipped {
        println!("skipped {id}: {reason}");
    }
    for (id, reason) in &report.failed {
        eprintln!("failed {id}: {reason}");
    }
    if report.failed.is_empty() {
        Ok(())
    } else {
        Err(format!("{} task(s) not submitted", report.failed.len()))
    }
}

fn scaffold(dir: PathBuf, prefix: String, tools: Option<PathBuf>) -> Result<(), String> {
    let tools = match tools {
        Some(t) => t,
        None => std::env::current_exe()
            .map_err(|e| e.to_string())?
            .parent()
            .map(Path::to_path_buf)
            .ok_or("cannot locate the taskfabric executables")?,
    };
    let files = submitter::scaffold(&dir, &prefix, &tools).map_err(|e| e.to_string())?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn stats(args: ConfigArgs, url: Option<String>, wait_for: Option<u64>, timeout: f64) -> Result<(), String> {
    let config = load(&args)?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(5)))
        .build()
        .into();
    let deadline = Instant::now() + Duration::from_secs_f64(timeout.max(0.0));
    let mut last_error = String::from("monitor address unknown");
    loop {
        // The address file may appear only once the monitor is up.
        let base = url.clone().or_else(|| monitor_url(&config));
        if let Some(base) = base {
            match agent
                .get(&format!("{base}/stats"))
                .call()
                .and_then(|mut r| r.body_mut().read_json::<RegistryStats>())
            {
                Ok(stats) => {
                    let done = stats.counts.get("DONE").copied().unwrap_or(0);
                    let finished = done + stats.failed;
                    let enough = wait_for.is_none_or(|n| finished >= n);
                    if enough || Instant::now() >= deadline {
                        println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
                        return match wait_for {
                            Some(n) if done < n => Err(format!("{done} of {n} tasks done")),
                            _ => Ok(()),
                        };
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        if wait_for.is_none() || Instant::now() >= deadline {
            return Err(format!("cannot read monitor stats: {last_error}"));
        }
        std::thread::sleep(Duration::from_millis(200));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Submit(_) | Command::Scaffold { .. } | Command::Stats { .. } => "warn",
        _ => "info",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    let result = match cli.command {
        Command::ClusterAgent { config, name, once } => cluster_agent(config, name, once),
        Command::WorkerAgent { config, name, slots, once } => worker_agent(config, name, slots, once),
        Command::Monitor { config, port, name, group } => monitor(config, port, name, group),
        Command::Submit(args) => submit(args),
        Command::Scaffold { dir, prefix, tools } => scaffold(dir, prefix, tools),
        Command::Stats {
            config,
            monitor_url,
            wait_for,
            timeout,
        } => stats(config, monitor_url, wait_for, timeout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("taskfabric: {e}");
            ExitCode::FAILURE
        }
    }
}
