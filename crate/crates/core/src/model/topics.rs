use serde::{Deserialize, Serialize};

use super::ModelError;

/// The four topic names binding a deployment together.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopicSet {
    pub prefix: String,
    pub new: String,
    pub jobs: String,
    pub done: String,
    pub error: String,
}

impl TopicSet {
    /// Status, result and error topics, in the order monitors subscribe to them.
    pub fn outcome_topics(&self) -> Vec<String> {
        vec![self.jobs.clone(), self.done.clone(), self.error.clone()]
    }

    pub fn all(&self) -> [&str; 4] {
        [&self.new, &self.jobs, &self.done, &self.error]
    }
}

pub fn is_valid_prefix(prefix: &str) -> bool {
    !prefix.is_empty()
        && prefix
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub fn derive_topic_set(prefix: &str) -> Result<TopicSet, ModelError> {
    if !is_valid_prefix(prefix) {
        return Err(ModelError::Config {
            key: "prefix".into(),
            reason: format!("{prefix:?} must match [A-Za-z0-9_.]+"),
        });
    }
    Ok(TopicSet {
        prefix: prefix.to_string(),
        new: format!("{prefix}-new"),
        jobs: format!("{prefix}-jobs"),
        done: format!("{prefix}-done"),
        error: format!("{prefix}-error"),
    })
}
