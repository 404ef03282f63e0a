//! Deployment configuration.
//!
//! The file is a flat `key = value` list (TOML syntax). Precedence is
//! built-in defaults, then the file, then explicit overrides. Relative
//! paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::topics::{derive_topic_set, is_valid_prefix};
use super::{ModelError, TopicSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeliveryMode {
    #[default]
    AtLeastOnce,
    ExactlyOnceEffective,
}

impl FromStr for DeliveryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AT_LEAST_ONCE" => Ok(DeliveryMode::AtLeastOnce),
            "EXACTLY_ONCE_EFFECTIVE" => Ok(DeliveryMode::ExactlyOnceEffective),
            other => Err(format!(
                "{other:?} is not AT_LEAST_ONCE or EXACTLY_ONCE_EFFECTIVE"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    /// Built-in discrete-event cluster simulator.
    Sim,
    /// Slurm command-line tools.
    Slurm,
}

/// One node of a workload-manager inventory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub cpus_total: u32,
    pub gpus_total: u32,
    pub memory_mb_total: u64,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, cpus_total: u32, gpus_total: u32, memory_mb_total: u64) -> Self {
        Self {
            name: name.into(),
            cpus_total,
            gpus_total,
            memory_mb_total,
        }
    }
}

impl FromStr for NodeSpec {
    type Err = String;

    /// Parses `name,cpus,gpus,memory_mb`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [name, cpus, gpus, mem] = parts[..] else {
            return Err(format!("{s:?} is not name,cpus,gpus,memory_mb"));
        };
        let num = |v: &str| v.parse::<u64>().map_err(|_| format!("{v:?} is not a number"));
        let node = NodeSpec {
            name: name.to_string(),
            cpus_total: u32::try_from(num(cpus)?).map_err(|e| e.to_string())?,
            gpus_total: u32::try_from(num(gpus)?).map_err(|e| e.to_string())?,
            memory_mb_total: num(mem)?,
        };
        if node.name.is_empty() || node.cpus_total == 0 || node.memory_mb_total == 0 {
            return Err(format!("{s:?} needs a name, cpus >= 1 and memory_mb >= 1"));
        }
        Ok(node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentConfig {
    pub broker_endpoint: String,
    pub prefix: String,
    pub poll_interval_s: f64,
    pub oversubscribe_slots: u32,
    pub default_timeout_s: u64,
    pub max_worker_slots: u32,
    pub monitor_http_port: u16,
    pub delivery: DeliveryMode,
    /// Name the agent reports; defaults to the host name.
    pub agent_name: Option<String>,
    pub workdir: PathBuf,
    pub datadir: PathBuf,
    /// `None` picks the simulator when nodes are configured, Slurm otherwise.
    pub scheduler: Option<SchedulerKind>,
    pub runner_command: String,
    pub worker_group: String,
    pub monitor_group: String,
    pub sim_nodes: Vec<NodeSpec>,
    /// GPUs the Slurm driver assumes, since `sinfo` output carries none.
    pub slurm_gpus: u32,
    pub command_timeout_s: f64,
    /// Where this configuration was read from, if anywhere.
    pub source: Option<PathBuf>,
}

pub const DEFAULT_CLUSTER_GROUP: &str = "cluster-agents";
pub const DEFAULT_MONITOR_GROUP: &str = "monitors";

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            broker_endpoint: "inproc:broker".into(),
            prefix: "tasks".into(),
            poll_interval_s: 5.0,
            oversubscribe_slots: 2,
            default_timeout_s: 86_400,
            max_worker_slots: 4,
            monitor_http_port: 8080,
            delivery: DeliveryMode::AtLeastOnce,
            agent_name: None,
            workdir: PathBuf::from("work"),
            datadir: PathBuf::from("data"),
            scheduler: None,
            runner_command: "taskfabric-run".into(),
            worker_group: DEFAULT_CLUSTER_GROUP.into(),
            monitor_group: DEFAULT_MONITOR_GROUP.into(),
            sim_nodes: Vec::new(),
            slurm_gpus: 0,
            command_timeout_s: 30.0,
            source: None,
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> ModelError {
    ModelError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ModelError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| bad(key, format!("{value:?}: {e}")))
}

impl DeploymentConfig {
    pub fn topics(&self) -> TopicSet {
        derive_topic_set(&self.prefix).expect("validated prefix")
    }

    pub fn poll_interval_ms(&self) -> u64 {
        (self.poll_interval_s * 1000.0).round().max(1.0) as u64
    }

    pub fn effective_scheduler(&self) -> SchedulerKind {
        self.scheduler.unwrap_or(if self.sim_nodes.is_empty() {
            SchedulerKind::Slurm
        } else {
            SchedulerKind::Sim
        })
    }

    /// Sets one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        match key {
            "broker_endpoint" => self.broker_endpoint = value.to_string(),
            "prefix" => self.prefix = value.to_string(),
            "poll_interval_s" => self.poll_interval_s = parse_num(key, value)?,
            "oversubscribe_slots" => self.oversubscribe_slots = parse_num(key, value)?,
            "default_timeout_s" => self.default_timeout_s = parse_num(key, value)?,
            "max_worker_slots" => self.max_worker_slots = parse_num(key, value)?,
            "monitor_http_port" => self.monitor_http_port = parse_num(key, value)?,
            "delivery" => self.delivery = value.parse().map_err(|e: String| bad(key, e))?,
            "agent_name" => self.agent_name = Some(value.to_string()),
            "workdir" => self.workdir = PathBuf::from(value),
            "datadir" => self.datadir = PathBuf::from(value),
            "scheduler" => {
                self.scheduler = Some(match value {
                    "sim" => SchedulerKind::Sim,
                    "slurm" => SchedulerKind::Slurm,
                    other => return Err(bad(key, format!("{other:?} is not sim or slurm"))),
                })
            }
            "runner_command" => self.runner_command = value.to_string(),
            "worker.group" => self.worker_group = value.to_string(),
            "monitor.group" => self.monitor_group = value.to_string(),
            "slurm.gpus" => self.slurm_gpus = parse_num(key, value)?,
            "command_timeout_s" => self.command_timeout_s = parse_num(key, value)?,
            _ => {
                if let Some(index) = key.strip_prefix("sim.node.") {
                    let index: usize = parse_num(key, index)?;
                    let node: NodeSpec = value.parse().map_err(|e: String| bad(key, e))?;
                    if self.sim_nodes.len() <= index {
                        self.sim_nodes.resize(index + 1, NodeSpec::new("", 0, 0, 0));
                    }
                    self.sim_nodes[index] = node;
                } else {
                    return Err(bad(key, "unknown configuration key"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_valid_prefix(&self.prefix) {
            return Err(bad("prefix", format!("{:?} must match [A-Za-z0-9_.]+", self.prefix)));
        }
        if !(self.poll_interval_s.is_finite() && self.poll_interval_s > 0.0) {
            return Err(bad("poll_interval_s", "must be a positive number"));
        }
        if self.default_timeout_s == 0 {
            return Err(bad("default_timeout_s", "must be positive"));
        }
        if self.max_worker_slots == 0 {
            return Err(bad("max_worker_slots", "must be positive"));
        }
        if self.broker_endpoint.is_empty() {
            return Err(bad("broker_endpoint", "must not be empty"));
        }
        if self.worker_group.is_empty() {
            return Err(bad("worker.group", "must not be empty"));
        }
        if let Some(i) = self.sim_nodes.iter().position(|n| n.name.is_empty()) {
            return Err(bad(&format!("sim.node.{i}"), "missing node definition"));
        }
        if !(self.command_timeout_s.is_finite() && self.command_timeout_s > 0.0) {
            return Err(bad("command_timeout_s", "must be a positive number"));
        }
        Ok(())
    }

    /// Builds a config from file text (if any) plus overrides.
    pub fn from_sources(
        text: Option<&str>,
        base_dir: Option<&Path>,
        overrides: &BTreeMap<String, String>,
    ) -> Result<Self, ModelError> {
        let mut config = DeploymentConfig::default();
        if let Some(text) = text {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                let line = e
                    .span()
                    .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1);
                ModelError::ConfigParse {
                    line,
                    message: e.message().to_string(),
                }
            })?;
            let mut flat = Vec::new();
            flatten("", &toml::Value::Table(table), &mut flat);
            for (key, value) in flat {
                config.set(&key, &value)?;
            }
        }
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        if let Some(base) = base_dir {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for path in [&mut self.workdir, &mut self.datadir] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(root) = self.broker_endpoint.strip_prefix("inproc:") {
            if !root.is_empty() && Path::new(root).is_relative() {
                self.broker_endpoint = format!("inproc:{}", base.join(root).display());
            }
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                if v.is_table() {
                    flatten(&join(k), v, out);
                } else {
                    out.push((join(k), scalar_text(v)));
                }
            }
        }
        other => out.push((prefix.to_string(), scalar_text(other))),
    }
}

fn scalar_text(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads the config file at `path` and applies `overrides` on top.
pub fn load_config(
    path: &Path,
    overrides: &BTreeMap<String, String>,
) -> Result<DeploymentConfig, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let absolute = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    let base = absolute.parent().map(Path::to_path_buf);
    let mut config = DeploymentConfig::from_sources(Some(&text), base.as_deref(), overrides)?;
    config.source = Some(absolute);
    Ok(config)
}
