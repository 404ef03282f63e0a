//! Shared domain types, the message wire format and deployment configuration.

mod config;
mod envelope;
mod ids;
mod params;
mod status;
mod topics;
mod wire;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    load_config, DeliveryMode, DeploymentConfig, NodeSpec, SchedulerKind, DEFAULT_CLUSTER_GROUP,
    DEFAULT_MONITOR_GROUP,
};
pub use envelope::{
    ErrorEnvelope, Message, ResultEnvelope, StatusUpdate, TaskSpec, MAX_ERROR_DETAIL,
};
pub use ids::{AgentIdentity, AgentKind, ResourceRequest, TaskId};
pub use params::{ParamValue, Params};
pub use status::{ErrorPhase, StatusKind};
pub use topics::{derive_topic_set, is_valid_prefix, TopicSet};
pub use wire::{decode_message, encode_message, DecodeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("parameter {key} has no JSON representation")]
    Unencodable { key: String },
    #[error("encoding failed: {0}")]
    Encoding(String),
    #[error("configuration key {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("cannot read config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("config parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    ConfigParse { line: Option<usize>, message: String },
}

impl ModelError {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ModelError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
