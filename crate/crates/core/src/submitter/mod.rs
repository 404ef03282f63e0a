//! Publishes task specs to the new-tasks topic.

mod scaffold;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use scaffold::{scaffold, ScaffoldError, DEMO_TASKS};

use crate::broker::{Broker, BrokerError};
use crate::model::{encode_message, DeploymentConfig, Message, ParamValue, Params, TaskId, TaskSpec, TopicSet};
use crate::monitor::{TaskRecord, ADDR_FILE};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionReport {
    pub submitted: Vec<TaskId>,
    pub skipped: Vec<(TaskId, String)>,
    pub failed: Vec<(TaskId, String)>,
}

/// Answers whether a task already finished successfully.
pub trait DoneOracle {
    fn is_done(&self, task_id: &TaskId) -> Result<bool, String>;
}

/// Asks a monitor's REST API.
pub struct HttpDoneOracle {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpDoneOracle {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(5)))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }
}

impl DoneOracle for HttpDoneOracle {
    fn is_done(&self, task_id: &TaskId) -> Result<bool, String> {
        let url = format!("{}/tasks/{}", self.base_url, task_id);
        let mut response = self.agent.get(&url).call().map_err(|e| e.to_string())?;
        match response.status().as_u16() {
            404 => Ok(false),
            200 => {
                let record: TaskRecord = response.body_mut().read_json().map_err(|e| e.to_string())?;
                Ok(record.latest_status == crate::model::StatusKind::Done)
            }
            other => Err(format!("monitor answered {other}")),
        }
    }
}

/// Where the deployment's monitor can be reached: the address it recorded
/// at startup, else the configured port on this host.
pub fn monitor_url(config: &DeploymentConfig) -> Option<String> {
    if let Ok(addr) = fs::read_to_string(config.datadir.join(ADDR_FILE)) {
        let addr = addr.trim();
        if !addr.is_empty() {
            return Some(format!("http://{addr}"));
        }
    }
    (config.monitor_http_port != 0).then(|| format!("http://127.0.0.1:{}", config.monitor_http_port))
}

/// Publishes `specs` in order, keyed by task id. With an oracle, tasks it
/// reports done are skipped; an unreachable oracle skips nothing.
pub fn submit(
    broker: &dyn Broker,
    topics: &TopicSet,
    specs: &[TaskSpec],
    oracle: Option<&dyn DoneOracle>,
) -> SubmissionReport {
    let mut report = SubmissionReport::default();
    let mut seen = BTreeSet::new();
    let mut oracle = oracle;
    let mut broker_down: Option<String> = None;
    for spec in specs {
        let id = spec.task_id.clone();
        if let Some(reason) = &broker_down {
            report.failed.push((id, reason.clone()));
            continue;
        }
        if !seen.insert(id.clone()) {
            report.skipped.push((id, "duplicate in batch".into()));
            continue;
        }
        if let Some(o) = oracle {
            match o.is_done(&id) {
                Ok(true) => {
                    report.skipped.push((id, "already done".into()));
                    continue;
                }
                Ok(false) => {}
                Err(e) => {
                    log::warn!("monitor unavailable, submitting without checking: {e}");
                    oracle = None;
                }
            }
        }
        let bytes = match encode_message(&Message::Task(spec.clone())) {
            Ok(bytes) => bytes,
            Err(e) => {
                report.failed.push((id, e.to_string()));
                continue;
            }
        };
        match broker.publish(&topics.new, Some(id.as_str().as_bytes()), &bytes) {
            Ok(_) => report.submitted.push(id),
            Err(e @ (BrokerError::Unavailable | BrokerError::Storage(_))) => {
                let reason = format!("broker unreachable: {e}");
                report.failed.push((id, reason.clone()));
                broker_down = Some(reason);
            }
            Err(e) => report.failed.push((id, e.to_string())),
        }
    }
    report
}

/// Parses a `key=value` parameter. The value is read as JSON when it
/// parses, and as a plain string otherwise.
pub fn parse_param(arg: &str) -> Result<(String, ParamValue), String> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| format!("parameter {arg:?} is not key=value"))?;
    let value = match serde_json::from_str::<serde_json::Value>(raw) {
        Ok(v) => ParamValue::from_json(&v),
        Err(_) => ParamValue::Str(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

pub fn params_from_args(args: &[String]) -> Result<Params, String> {
    let mut params = Params::new();
    for arg in args {
        let (k, v) = parse_param(arg)?;
        params.insert(k, v).map_err(|e| e.to_string())?;
    }
    Ok(params)
}

/// Reads a JSON list of task specs.
pub fn load_manifest(path: &Path) -> Result<Vec<TaskSpec>, String> {
    let raw = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let specs: Vec<TaskSpec> = serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
    for spec in &specs {
        spec.validate().map_err(|e| format!("{}: {e}", spec.task_id))?;
    }
    Ok(specs)
}
