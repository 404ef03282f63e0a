//! Partitioned, offset-addressed publish/subscribe log.
//!
//! [`Broker`] is the contract any log-broker driver satisfies. The crate
//! ships [`InProcBroker`], a deterministic backend that keeps the log in
//! memory or journals it to a directory shared by every process on the
//! machine.

mod inproc;
mod journal;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TopicSet;

pub use inproc::InProcBroker;
pub(crate) use journal::write_atomic;

/// Partition count for the new-tasks topic.
pub const NEW_TOPIC_PARTITIONS: u32 = 8;
/// Partition count for the status, result and error topics.
pub const OUTCOME_TOPIC_PARTITIONS: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerRecord {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
    pub key: Option<Vec<u8>>,
    pub value: Vec<u8>,
    pub append_time_ms: i64,
}

impl BrokerRecord {
    pub fn topic_partition(&self) -> TopicPartition {
        TopicPartition::new(&self.topic, self.partition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConsumerGroupId(String);

impl ConsumerGroupId {
    pub fn new(value: impl Into<String>) -> Result<Self, BrokerError> {
        let value = value.into();
        if value.is_empty() || value.contains(['/', '\\']) || value.starts_with('.') {
            return Err(BrokerError::InvalidArgument(format!(
                "consumer group {value:?} must be a non-empty file-name-safe string"
            )));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConsumerGroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicPartition {
    pub topic: String,
    pub partition: u32,
}

impl TopicPartition {
    pub fn new(topic: impl Into<String>, partition: u32) -> Self {
        Self {
            topic: topic.into(),
            partition,
        }
    }
}

impl fmt::Display for TopicPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.topic, self.partition)
    }
}

/// A member's registration in a consumer group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub group: ConsumerGroupId,
    pub topics: BTreeSet<String>,
    pub member_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitPosition {
    pub group: ConsumerGroupId,
    pub topic: String,
    pub partition: u32,
    pub next_offset: u64,
}

/// Partitions held by each member of a group.
pub type Assignment = BTreeMap<String, Vec<TopicPartition>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("topic {topic} exists with {existing} partitions, not {requested}")]
    TopicConflict {
        topic: String,
        existing: u32,
        requested: u32,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("group {group} rebalanced (generation {generation}); member {member} must refresh its assignment")]
    Rebalanced {
        group: String,
        member: String,
        generation: u64,
    },
    #[error("member {member} is not part of group {group}")]
    NotMember { group: String, member: String },
    #[error("partition {0} is not assigned to this member")]
    NotAssigned(TopicPartition),
    #[error("group {0} members must subscribe to identical topic sets")]
    InconsistentSubscription(String),
    #[error("broker unavailable")]
    Unavailable,
    #[error("no broker driver for endpoint {0:?}")]
    UnsupportedEndpoint(String),
    #[error("broker storage error: {0}")]
    Storage(String),
}

impl BrokerError {
    /// Errors the caller may recover from by retrying (possibly after re-subscribing).
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            BrokerError::Rebalanced { .. }
                | BrokerError::Unavailable
                | BrokerError::NotMember { .. }
                | BrokerError::NotAssigned(_)
                | BrokerError::Storage(_)
        )
    }
}

impl From<std::io::Error> for BrokerError {
    fn from(e: std::io::Error) -> Self {
        BrokerError::Storage(e.to_string())
    }
}

/// The log-broker adapter contract.
pub trait Broker: Send + Sync {
    /// Creates a topic; repeating the call with the same partition count is a no-op.
    fn create_topic(&self, name: &str, partitions: u32) -> Result<(), BrokerError>;

    fn partition_count(&self, topic: &str) -> Result<u32, BrokerError>;

    /// Appends a record, returning its `(partition, offset)`.
    ///
    /// Keyed records go to `fnv1a64(key) % partitions`; unkeyed ones round-robin.
    fn publish(&self, topic: &str, key: Option<&[u8]>, value: &[u8])
        -> Result<(u32, u64), BrokerError>;

    /// Joins `member_id` to `group` for `topics`, triggering a rebalance.
    fn subscribe(
        &self,
        group: &ConsumerGroupId,
        topics: &[String],
        member_id: &str,
    ) -> Result<Subscription, BrokerError>;

    /// Leaves the group cleanly; uncommitted progress is forgotten.
    fn unsubscribe(&self, subscription: &Subscription) -> Result<(), BrokerError>;

    fn poll(
        &self,
        subscription: &Subscription,
        max_records: usize,
        timeout: Duration,
    ) -> Result<Vec<BrokerRecord>, BrokerError>;

    fn commit(
        &self,
        subscription: &Subscription,
        positions: &[CommitPosition],
    ) -> Result<(), BrokerError>;

    /// Recomputes the group's assignment from its current membership.
    fn rebalance(&self, group: &ConsumerGroupId) -> Result<Assignment, BrokerError>;

    /// Partitions currently held by the subscription's member.
    fn assignment(&self, subscription: &Subscription) -> Result<Vec<TopicPartition>, BrokerError>;

    /// Next offset the group will read from on `topic/partition`.
    fn committed(
        &self,
        group: &ConsumerGroupId,
        topic: &str,
        partition: u32,
    ) -> Result<u64, BrokerError>;

    /// Offset one past the last record of the partition.
    fn end_offset(&self, topic: &str, partition: u32) -> Result<u64, BrokerError>;

    /// Reads records directly, outside any consumer group.
    fn read(
        &self,
        topic: &str,
        partition: u32,
        from_offset: u64,
        max_records: usize,
    ) -> Result<Vec<BrokerRecord>, BrokerError>;

    /// Keeps a member alive for backends that expire idle members.
    fn heartbeat(&self, _subscription: &Subscription) -> Result<(), BrokerError> {
        Ok(())
    }
}

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET_BASIS, |hash, b| {
        (hash ^ u64::from(*b)).wrapping_mul(PRIME)
    })
}

pub fn partition_for_key(key: &[u8], partitions: u32) -> u32 {
    (fnv1a64(key) % u64::from(partitions)) as u32
}

/// Range assignment: partitions (sorted) split into contiguous runs over
/// members (sorted), earlier members taking the remainder.
pub fn range_assign(members: &[String], partitions: &[TopicPartition]) -> Assignment {
    let mut members: Vec<&String> = members.iter().collect();
    members.sort();
    members.dedup();
    let mut partitions: Vec<&TopicPartition> = partitions.iter().collect();
    partitions.sort();
    let mut out = Assignment::new();
    if members.is_empty() {
        return out;
    }
    let base = partitions.len() / members.len();
    let extra = partitions.len() % members.len();
    let mut next = 0;
    for (i, member) in members.into_iter().enumerate() {
        let take = base + usize::from(i < extra);
        out.insert(
            member.clone(),
            partitions[next..next + take].iter().map(|p| (*p).clone()).collect(),
        );
        next += take;
    }
    out
}

/// Creates the deployment's four topics with the default partition counts.
pub fn ensure_topics(broker: &dyn Broker, topics: &TopicSet) -> Result<(), BrokerError> {
    broker.create_topic(&topics.new, NEW_TOPIC_PARTITIONS)?;
    for name in [&topics.jobs, &topics.done, &topics.error] {
        broker.create_topic(name, OUTCOME_TOPIC_PARTITIONS)?;
    }
    Ok(())
}

/// Opens the broker named by a `broker_endpoint` setting.
///
/// `inproc:` alone selects a private in-memory log; `inproc:<root>`
/// selects the journaled log under `<root>`.
pub fn connect(endpoint: &str) -> Result<Arc<dyn Broker>, BrokerError> {
    match endpoint.strip_prefix("inproc:") {
        Some("") => Ok(Arc::new(InProcBroker::ephemeral())),
        Some(root) => Ok(Arc::new(InProcBroker::journaled(root)?)),
        None => Err(BrokerError::UnsupportedEndpoint(endpoint.to_string())),
    }
}

/// Tracks consumed offsets that are not yet safe to commit.
///
/// Commit positions must be contiguous, so a partition can only be
/// committed up to its oldest unsettled offset.
#[derive(Debug, Default, Clone)]
pub struct OffsetTracker {
    partitions: BTreeMap<TopicPartition, PartitionProgress>,
}

#[derive(Debug, Default, Clone)]
struct PartitionProgress {
    unsettled: BTreeSet<u64>,
    next_after_seen: u64,
    committed: u64,
}

impl OffsetTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records that `offset` was received and must be settled before commit.
    pub fn track(&mut self, tp: &TopicPartition, offset: u64) {
        let p = self.partitions.entry(tp.clone()).or_default();
        p.unsettled.insert(offset);
        p.next_after_seen = p.next_after_seen.max(offset + 1);
    }

    pub fn settle(&mut self, tp: &TopicPartition, offset: u64) {
        if let Some(p) = self.partitions.get_mut(tp) {
            p.unsettled.remove(&offset);
        }
    }

    /// Forgets partitions the member no longer holds.
    pub fn retain(&mut self, assigned: &[TopicPartition]) {
        self.partitions.retain(|tp, _| assigned.contains(tp));
    }

    pub fn clear(&mut self) {
        self.partitions.clear();
    }

    /// Positions that advanced since the last call, for `group`.
    pub fn ready_commits(&mut self, group: &ConsumerGroupId) -> Vec<CommitPosition> {
        let mut out = Vec::new();
        for (tp, p) in &mut self.partitions {
            let next = p.unsettled.first().copied().unwrap_or(p.next_after_seen);
            if next > p.committed {
                out.push(CommitPosition {
                    group: group.clone(),
                    topic: tp.topic.clone(),
                    partition: tp.partition,
                    next_offset: next,
                });
            }
        }
        out
    }

    /// Marks positions returned by [`ready_commits`](Self::ready_commits) as committed.
    pub fn mark_committed(&mut self, positions: &[CommitPosition]) {
        for pos in positions {
            if let Some(p) = self
                .partitions
                .get_mut(&TopicPartition::new(&pos.topic, pos.partition))
            {
                p.committed = p.committed.max(pos.next_offset);
            }
        }
    }
}
