use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

/// Lifecycle status carried on the status topic.
///
/// The core values serialize as their uppercase names; anything else a
/// payload posts is kept verbatim as `Custom`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StatusKind {
    Submitted,
    Waiting,
    Running,
    Done,
    Error,
    Cancelled,
    Custom(String),
}

impl StatusKind {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Ok(match s {
            "SUBMITTED" => StatusKind::Submitted,
            "WAITING" => StatusKind::Waiting,
            "RUNNING" => StatusKind::Running,
            "DONE" => StatusKind::Done,
            "ERROR" => StatusKind::Error,
            "CANCELLED" => StatusKind::Cancelled,
            "" => return Err(ModelError::invalid("status", "must not be empty")),
            other => StatusKind::Custom(other.to_string()),
        })
    }

    pub fn custom(s: impl Into<String>) -> Result<Self, ModelError> {
        Self::parse(&s.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            StatusKind::Submitted => "SUBMITTED",
            StatusKind::Waiting => "WAITING",
            StatusKind::Running => "RUNNING",
            StatusKind::Done => "DONE",
            StatusKind::Error => "ERROR",
            StatusKind::Cancelled => "CANCELLED",
            StatusKind::Custom(s) => s,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            StatusKind::Done | StatusKind::Error | StatusKind::Cancelled
        )
    }

    /// Position on the core lifecycle path; `None` for custom and failure states.
    pub fn lifecycle_rank(&self) -> Option<u8> {
        match self {
            StatusKind::Submitted => Some(0),
            StatusKind::Waiting => Some(1),
            StatusKind::Running => Some(2),
            StatusKind::Done => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for StatusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StatusKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for StatusKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StatusKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        StatusKind::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Where in a task's life an error happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ErrorPhase {
    Submit,
    Launch,
    Run,
    Timeout,
    Internal,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_values_use_uppercase_names() {
        for (kind, name) in [
            (StatusKind::Submitted, "SUBMITTED"),
            (StatusKind::Waiting, "WAITING"),
            (StatusKind::Running, "RUNNING"),
            (StatusKind::Done, "DONE"),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{name}\""));
            assert_eq!(StatusKind::parse(name).unwrap(), kind);
        }
    }

    #[test]
    fn custom_values_are_verbatim() {
        let kind = StatusKind::custom("STAGE_2").unwrap();
        assert_eq!(kind, StatusKind::Custom("STAGE_2".into()));
        assert_eq!(serde_json::to_string(&kind).unwrap(), "\"STAGE_2\"");
        // a custom spelling of a core name collapses to the core value
        assert_eq!(StatusKind::custom("DONE").unwrap(), StatusKind::Done);
        assert!(StatusKind::custom("").is_err());
    }
}
