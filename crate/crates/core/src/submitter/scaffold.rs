//! Generates a self-contained demo project.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agent::shell_quote;
use crate::model::is_valid_prefix;

/// Tasks submitted by the generated demo.
pub const DEMO_TASKS: usize = 6;

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("{} exists and is not empty", .0.display())]
    NotEmpty(PathBuf),
    #[error("invalid topic prefix {0:?}")]
    InvalidPrefix(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

const CONFIG: &str = r#"# Deployment settings shared by every component of this project.
prefix = "@PREFIX@"
broker_endpoint = "inproc:broker"
workdir = "work"
datadir = "data"
poll_interval_s = 0.5
oversubscribe_slots = 2
max_worker_slots = 2
# 0 picks a free port; the monitor records it in data/monitor.addr.
monitor_http_port = 0
runner_command = "@RUNNER@"

# A small simulated cluster: name,cpus,gpus,memory_mb
sim.node.0 = "node0,2,0,4096"
sim.node.1 = "node1,2,0,4096"
"#;

const START: &str = r#"#!/bin/sh
# Starts the @WHAT@ for this project. Extra arguments are passed through.
ROOT=$(cd "$(dirname "$0")/.." && pwd)
TASKFABRIC=${TASKFABRIC:-@TASKFABRIC@}
exec "$TASKFABRIC" @COMMAND@ --config "$ROOT/taskfabric.toml" "$@"
"#;

const PAYLOAD: &str = r#"#!/bin/sh
# Demo payload: multiplies two n x n matrices and reports the sum of the
# entries of the product. Called as `matrix.sh <params.json>`.
#   A[i][j] = (3i + 5j + seed) mod 10
#   B[i][j] = (7i + 2j + seed) mod 10
set -eu
field() { sed -n "s/.*\"$1\":\([0-9][0-9]*\).*/\1/p" "$2"; }
n=$(field n "$1"); n=${n:-10}
seed=$(field seed "$1"); seed=${seed:-0}
echo "TASKFABRIC_STATUS MULTIPLYING"
awk -v n="$n" -v seed="$seed" 'BEGIN {
  total = 0
  for (i = 0; i < n; i++)
    for (j = 0; j < n; j++)
      for (k = 0; k < n; k++)
        total += ((3*i + 5*k + seed) % 10) * ((7*k + 2*j + seed) % 10)
  printf "{\"checksum\": %d, \"n\": %d, \"seed\": %d}\n", total, n, seed
}'
"#;

const SUBMIT: &str = r#"#!/bin/sh
# Submits the demo tasks: matrix products of growing size.
set -eu
ROOT=$(cd "$(dirname "$0")/.." && pwd)
TASKFABRIC=${TASKFABRIC:-@TASKFABRIC@}
i=1
while [ "$i" -le @COUNT@ ]; do
  "$TASKFABRIC" submit --config "$ROOT/taskfabric.toml" \
    --task-id "demo-$i" --script "$ROOT/payload/matrix.sh" \
    --cpus 1 --mem 256 --timeout 600 \
    --param "n=$((i * 4))" --param "seed=$i"
  i=$((i + 1))
done
"#;

const RUN_DEMO: &str = r#"#!/bin/sh
# Starts a monitor, a cluster agent and a worker agent, submits the demo
# tasks and waits until all of them have finished.
set -eu
ROOT=$(cd "$(dirname "$0")" && pwd)
TASKFABRIC=${TASKFABRIC:-@TASKFABRIC@}
export TASKFABRIC
mkdir -p "$ROOT/logs"
"$ROOT/bin/monitor.sh" > "$ROOT/logs/monitor.log" 2>&1 &
monitor=$!
"$ROOT/bin/cluster-agent.sh" > "$ROOT/logs/cluster-agent.log" 2>&1 &
cluster=$!
"$ROOT/bin/worker-agent.sh" > "$ROOT/logs/worker-agent.log" 2>&1 &
worker=$!
trap 'kill $monitor $cluster $worker 2>/dev/null || true; wait' EXIT
"$ROOT/bin/submit-demo.sh"
"$TASKFABRIC" stats --config "$ROOT/taskfabric.toml" --wait-for @COUNT@ --timeout 120
"#;

/// Writes a runnable project into `dir`, which must be absent or empty.
/// `tools` is the directory holding the `taskfabric` and
/// `taskfabric-run` executables. Returns the files created.
pub fn scaffold(dir: &Path, prefix: &str, tools: &Path) -> Result<Vec<PathBuf>, ScaffoldError> {
    if !is_valid_prefix(prefix) {
        return Err(ScaffoldError::InvalidPrefix(prefix.to_string()));
    }
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScaffoldError::Io { path, source }
    };
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(ScaffoldError::NotEmpty(dir.to_path_buf()));
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(dir)(e)),
    }
    let tools = std::path::absolute(tools).map_err(io_err(tools))?;
    let taskfabric = shell_quote(&tools.join("taskfabric").to_string_lossy());
    let runner = shell_quote(&tools.join("taskfabric-run").to_string_lossy());
    let fill = |template: &str| {
        template
            .replace("@PREFIX@", prefix)
            .replace("@TASKFABRIC@", &taskfabric)
            .replace("@RUNNER@", &runner.replace('\\', "\\\\").replace('"', "\\\""))
            .replace("@COUNT@", &DEMO_TASKS.to_string())
    };
    let start = |what: &str, command: &str| fill(START).replace("@WHAT@", what).replace("@COMMAND@", command);
    let files: Vec<(&str, String, bool)> = vec![
        ("taskfabric.toml", fill(CONFIG), false),
        ("bin/cluster-agent.sh", start("cluster agent", "cluster-agent"), true),
        ("bin/worker-agent.sh", start("worker agent", "worker-agent"), true),
        ("bin/monitor.sh", start("monitor", "monitor"), true),
        ("bin/submit-demo.sh", fill(SUBMIT), true),
        ("payload/matrix.sh", PAYLOAD.to_string(), true),
        ("run-demo.sh", fill(RUN_DEMO), true),
    ];
    let mut created = Vec::new();
    for (rel, text, executable) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        if executable {
            fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).map_err(io_err(&path))?;
        }
        created.push(path);
    }
    Ok(created)
}
