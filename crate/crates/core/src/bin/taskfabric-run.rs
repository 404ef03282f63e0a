//! Launches one task's payload: `taskfabric-run [--config <file>] --task-id <id> --script <entry>`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use taskfabric::agent::{host_name, AGENT_ENV};
use taskfabric::broker::connect;
use taskfabric::model::{load_config, AgentIdentity, DeploymentConfig, TaskId};
use taskfabric::runner::{run_task, RunnerOptions};

#[derive(Parser)]
#[command(name = "taskfabric-run", version, about = "Runs one task and reports its outcome")]
struct Cli {
    #[arg(long, env = "TASKFABRIC_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    task_id: String,
    /// Executable, or `builtin:<name>`.
    #[arg(long)]
    script: String,
}

/// Exit code for problems found before the payload could be reached.
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => load_config(path, &BTreeMap::new()),
        None => DeploymentConfig::from_sources(None, None, &BTreeMap::new()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("taskfabric-run: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let task_id = match TaskId::new(cli.task_id) {
        Ok(id) => id,
        Err(e) => {
            eprintln!("taskfabric-run: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let agent = std::env::var(AGENT_ENV)
        .ok()
        .and_then(|tag| AgentIdentity::parse_tagged(&tag).ok())
        .unwrap_or_else(|| AgentIdentity::worker(host_name()).expect("host name is not empty"));
    let broker = match connect(&config.broker_endpoint) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("taskfabric-run: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let outcome = run_task(&config, broker, agent, &task_id, &cli.script, &RunnerOptions::default());
    ExitCode::from(outcome.exit_code() as u8)
}
