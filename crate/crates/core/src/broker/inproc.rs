use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::journal::{Disk, MemberEntry, MembersFile, StoredRecord, GROUPS_DIR};
use super::{
    partition_for_key, range_assign, Assignment, Broker, BrokerError, BrokerRecord,
    CommitPosition, ConsumerGroupId, Subscription, TopicPartition,
};
use crate::clock::now_ms;

/// Members not seen for this long are dropped from journaled groups.
pub const DEFAULT_SESSION_TIMEOUT_MS: i64 = 30_000;
const WAIT_SLICE: Duration = Duration::from_millis(20);

/// The built-in broker backend.
///
/// Ephemeral instances keep everything in memory. Journaled instances
/// persist logs, commit positions and group membership under a root
/// directory and coordinate with other processes through a lock file, so
/// agents, runners and monitors on one machine can share a deployment.
/// Cloning yields another handle to the same broker.
#[derive(Clone)]
pub struct InProcBroker {
    shared: Arc<Shared>,
}

struct Shared {
    state: Mutex<State>,
    arrived: Condvar,
    available: AtomicBool,
    disk: Option<Disk>,
    session_timeout_ms: Option<i64>,
}

#[derive(Default)]
struct State {
    topics: BTreeMap<String, TopicLog>,
    groups: BTreeMap<String, GroupState>,
    locals: BTreeMap<(String, String), LocalMember>,
    round_robin: BTreeMap<String, u64>,
}

#[derive(Default)]
struct TopicLog {
    partitions: Vec<PartitionLog>,
}

#[derive(Default)]
struct PartitionLog {
    records: Vec<StoredRecord>,
    disk_len: u64,
}

#[derive(Default)]
struct GroupState {
    members: MembersFile,
    commits: BTreeMap<TopicPartition, u64>,
}

/// Consumer state that lives only in the member's own process.
struct LocalMember {
    cursors: BTreeMap<TopicPartition, u64>,
    seen_generation: u64,
    assigned: Vec<TopicPartition>,
    rotation: usize,
}

struct Tx<'a> {
    state: &'a mut State,
    disk: Option<&'a Disk>,
    session_timeout_ms: Option<i64>,
    now_ms: i64,
}

impl InProcBroker {
    pub fn ephemeral() -> Self {
        Self::build(None, None)
    }

    /// Opens (or creates) a journaled broker rooted at `root`.
    pub fn journaled(root: impl AsRef<Path>) -> Result<Self, BrokerError> {
        Self::journaled_with_session_timeout(root, DEFAULT_SESSION_TIMEOUT_MS)
    }

    pub fn journaled_with_session_timeout(
        root: impl AsRef<Path>,
        session_timeout_ms: i64,
    ) -> Result<Self, BrokerError> {
        let disk = Disk::open(root.as_ref())?;
        Ok(Self::build(Some(disk), Some(session_timeout_ms)))
    }

    fn build(disk: Option<Disk>, session_timeout_ms: Option<i64>) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State::default()),
                arrived: Condvar::new(),
                available: AtomicBool::new(true),
                disk,
                session_timeout_ms,
            }),
        }
    }

    /// Test hook: while unavailable every operation fails with
    /// [`BrokerError::Unavailable`].
    pub fn set_available(&self, available: bool) {
        self.shared.available.store(available, Ordering::SeqCst);
        self.shared.arrived.notify_all();
    }

    /// Test hook: drops a member as if its process died. Nothing it
    /// consumed after its last commit is remembered.
    pub fn simulate_crash(&self, subscription: &Subscription) -> Result<(), BrokerError> {
        self.leave(subscription)
    }

    fn lock_state(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn with_tx<R>(
        &self,
        f: impl FnOnce(&mut Tx<'_>) -> Result<R, BrokerError>,
    ) -> Result<R, BrokerError> {
        let mut guard = self.lock_state();
        self.run_tx(&mut guard, f)
    }

    fn run_tx<R>(
        &self,
        guard: &mut MutexGuard<'_, State>,
        f: impl FnOnce(&mut Tx<'_>) -> Result<R, BrokerError>,
    ) -> Result<R, BrokerError> {
        if !self.shared.available.load(Ordering::SeqCst) {
            return Err(BrokerError::Unavailable);
        }
        let disk = self.shared.disk.as_ref();
        if let Some(disk) = disk {
            disk.lock()?;
        }
        let mut tx = Tx {
            state: guard,
            disk,
            session_timeout_ms: self.shared.session_timeout_ms,
            now_ms: now_ms(),
        };
        let result = f(&mut tx);
        if let Some(disk) = disk {
            disk.unlock();
        }
        result
    }

    fn leave(&self, subscription: &Subscription) -> Result<(), BrokerError> {
        let group = subscription.group.as_str();
        self.with_tx(|tx| {
            tx.load_group(group)?;
            let state = tx.state.groups.get_mut(group).expect("loaded group");
            if state.members.members.remove(&subscription.member_id).is_some() {
                state.members.generation += 1;
                tx.save_members(group)?;
            }
            tx.state
                .locals
                .remove(&(group.to_string(), subscription.member_id.clone()));
            Ok(())
        })?;
        self.shared.arrived.notify_all();
        Ok(())
    }
}

impl Tx<'_> {
    /// Brings the local view of `topic` up to date; `None` if it does not exist.
    fn sync_topic(&mut self, topic: &str) -> Result<Option<&mut TopicLog>, BrokerError> {
        if let Some(disk) = self.disk {
            if let Some(count) = disk.topic_partitions(topic)? {
                let log = self.state.topics.entry(topic.to_string()).or_default();
                while log.partitions.len() < count as usize {
                    log.partitions.push(PartitionLog::default());
                }
                for (p, part) in log.partitions.iter_mut().enumerate() {
                    let (records, end) = disk.read_from(topic, p as u32, part.disk_len)?;
                    part.records.extend(records);
                    part.disk_len = end;
                }
            }
        }
        Ok(self.state.topics.get_mut(topic))
    }

    fn topic(&mut self, topic: &str) -> Result<&mut TopicLog, BrokerError> {
        self.sync_topic(topic)?
            .ok_or_else(|| BrokerError::UnknownTopic(topic.to_string()))
    }

    fn partition(&mut self, topic: &str, partition: u32) -> Result<&mut PartitionLog, BrokerError> {
        let log = self.topic(topic)?;
        let count = log.partitions.len();
        log.partitions.get_mut(partition as usize).ok_or_else(|| {
            BrokerError::InvalidArgument(format!(
                "topic {topic} has {count} partitions, no partition {partition}"
            ))
        })
    }

    fn load_group(&mut self, group: &str) -> Result<(), BrokerError> {
        let state = self.state.groups.entry(group.to_string()).or_default();
        if let Some(disk) = self.disk {
            state.members = disk.read_members(group)?;
            state.commits = disk.read_offsets(group)?;
        }
        if let Some(timeout) = self.session_timeout_ms {
            let now = self.now_ms;
            let before = state.members.members.len();
            state
                .members
                .members
                .retain(|_, m| now - m.last_seen_ms <= timeout);
            if state.members.members.len() != before {
                state.members.generation += 1;
                self.save_members(group)?;
            }
        }
        Ok(())
    }

    fn save_members(&self, group: &str) -> Result<(), BrokerError> {
        if let Some(disk) = self.disk {
            disk.write_members(group, &self.state.groups[group].members)?;
        }
        Ok(())
    }

    fn save_commits(&self, group: &str) -> Result<(), BrokerError> {
        if let Some(disk) = self.disk {
            disk.write_offsets(group, &self.state.groups[group].commits)?;
        }
        Ok(())
    }

    /// Refreshes a member's liveness stamp, writing it out only when stale.
    fn touch(&mut self, group: &str, member: &str) -> Result<(), BrokerError> {
        let Some(timeout) = self.session_timeout_ms else {
            return Ok(());
        };
        let now = self.now_ms;
        let entry = self
            .state
            .groups
            .get_mut(group)
            .and_then(|g| g.members.members.get_mut(member));
        if let Some(entry) = entry {
            if now - entry.last_seen_ms > timeout / 4 {
                entry.last_seen_ms = now;
                self.save_members(group)?;
            }
        }
        Ok(())
    }

    fn require_member(&self, group: &str, member: &str) -> Result<(), BrokerError> {
        let present = self
            .state
            .groups
            .get(group)
            .is_some_and(|g| g.members.members.contains_key(member));
        if present {
            Ok(())
        } else {
            Err(BrokerError::NotMember {
                group: group.to_string(),
                member: member.to_string(),
            })
        }
    }

    fn assignment(&mut self, group: &str) -> Result<Assignment, BrokerError> {
        let members = &self.state.groups[group].members.members;
        let ids: Vec<String> = members.keys().cloned().collect();
        let topics: BTreeSet<String> = members
            .values()
            .flat_map(|m| m.topics.iter().cloned())
            .collect();
        let mut partitions = Vec::new();
        for topic in topics {
            let count = self.topic(&topic)?.partitions.len() as u32;
            partitions.extend((0..count).map(|p| TopicPartition::new(&topic, p)));
        }
        Ok(range_assign(&ids, &partitions))
    }

    fn end_offset(&mut self, topic: &str, partition: u32) -> Result<u64, BrokerError> {
        Ok(self.partition(topic, partition)?.records.len() as u64)
    }

    fn read(
        &mut self,
        topic: &str,
        partition: u32,
        from: u64,
        max: usize,
    ) -> Result<Vec<BrokerRecord>, BrokerError> {
        let part = self.partition(topic, partition)?;
        Ok(part
            .records
            .iter()
            .enumerate()
            .skip(from as usize)
            .take(max)
            .map(|(offset, r)| BrokerRecord {
                topic: topic.to_string(),
                partition,
                offset: offset as u64,
                key: r.key.clone(),
                value: r.value.clone(),
                append_time_ms: r.append_time_ms,
            })
            .collect())
    }
}

fn valid_topic_name(name: &str) -> bool {
    !name.is_empty()
        && name != GROUPS_DIR
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl Broker for InProcBroker {
    fn create_topic(&self, name: &str, partitions: u32) -> Result<(), BrokerError> {
        if !valid_topic_name(name) {
            return Err(BrokerError::InvalidArgument(format!("bad topic name {name:?}")));
        }
        if partitions == 0 {
            return Err(BrokerError::InvalidArgument("partitions must be >= 1".into()));
        }
        self.with_tx(|tx| {
            if let Some(existing) = tx.sync_topic(name)? {
                let existing = existing.partitions.len() as u32;
                if existing != partitions {
                    return Err(BrokerError::TopicConflict {
                        topic: name.to_string(),
                        existing,
                        requested: partitions,
                    });
                }
                return Ok(());
            }
            if let Some(disk) = tx.disk {
                disk.create_topic(name, partitions)?;
            }
            let log = tx.state.topics.entry(name.to_string()).or_default();
            log.partitions = (0..partitions).map(|_| PartitionLog::default()).collect();
            Ok(())
        })
    }

    fn partition_count(&self, topic: &str) -> Result<u32, BrokerError> {
        self.with_tx(|tx| Ok(tx.topic(topic)?.partitions.len() as u32))
    }

    fn publish(
        &self,
        topic: &str,
        key: Option<&[u8]>,
        value: &[u8],
    ) -> Result<(u32, u64), BrokerError> {
        let coords = self.with_tx(|tx| {
            let count = tx.topic(topic)?.partitions.len() as u32;
            let partition = match key {
                Some(key) => partition_for_key(key, count),
                None => {
                    let counter = tx.state.round_robin.entry(topic.to_string()).or_insert(0);
                    let p = (*counter % u64::from(count)) as u32;
                    *counter += 1;
                    p
                }
            };
            let record = StoredRecord {
                key: key.map(<[u8]>::to_vec),
                value: value.to_vec(),
                append_time_ms: tx.now_ms,
            };
            let disk = tx.disk;
            let part = tx.partition(topic, partition)?;
            if let Some(disk) = disk {
                part.disk_len = disk.append(topic, partition, &record)?;
            }
            part.records.push(record);
            Ok((partition, part.records.len() as u64 - 1))
        })?;
        self.shared.arrived.notify_all();
        Ok(coords)
    }

    fn subscribe(
        &self,
        group: &ConsumerGroupId,
        topics: &[String],
        member_id: &str,
    ) -> Result<Subscription, BrokerError> {
        if topics.is_empty() {
            return Err(BrokerError::InvalidArgument("no topics to subscribe to".into()));
        }
        if member_id.is_empty() {
            return Err(BrokerError::InvalidArgument("member id must not be empty".into()));
        }
        let topic_set: BTreeSet<String> = topics.iter().cloned().collect();
        let g = group.as_str();
        self.with_tx(|tx| {
            for topic in &topic_set {
                tx.topic(topic)?;
            }
            tx.load_group(g)?;
            let now = tx.now_ms;
            let state = tx.state.groups.get_mut(g).expect("loaded group");
            let clash = state
                .members
                .members
                .iter()
                .any(|(id, m)| id != member_id && m.topics.iter().cloned().collect::<BTreeSet<_>>() != topic_set);
            if clash {
                return Err(BrokerError::InconsistentSubscription(g.to_string()));
            }
            state.members.members.insert(
                member_id.to_string(),
                MemberEntry {
                    topics: topic_set.iter().cloned().collect(),
                    last_seen_ms: now,
                },
            );
            state.members.generation += 1;
            let generation = state.members.generation;
            tx.save_members(g)?;
            let assigned = tx.assignment(g)?.remove(member_id).unwrap_or_default();
            tx.state.locals.insert(
                (g.to_string(), member_id.to_string()),
                LocalMember {
                    cursors: BTreeMap::new(),
                    seen_generation: generation,
                    assigned,
                    rotation: 0,
                },
            );
            Ok(())
        })?;
        self.shared.arrived.notify_all();
        Ok(Subscription {
            group: group.clone(),
            topics: topic_set,
            member_id: member_id.to_string(),
        })
    }

    fn unsubscribe(&self, subscription: &Subscription) -> Result<(), BrokerError> {
        self.leave(subscription)
    }

    fn poll(
        &self,
        subscription: &Subscription,
        max_records: usize,
        timeout: Duration,
    ) -> Result<Vec<BrokerRecord>, BrokerError> {
        if max_records == 0 {
            return Err(BrokerError::InvalidArgument("max_records must be >= 1".into()));
        }
        let deadline = Instant::now() + timeout;
        let g = subscription.group.as_str();
        let member = subscription.member_id.as_str();
        let mut guard = self.lock_state();
        loop {
            let batch = self.run_tx(&mut guard, |tx| {
                tx.load_group(g)?;
                tx.require_member(g, member)?;
                tx.touch(g, member)?;
                let generation = tx.state.groups[g].members.generation;
                let mine = tx.assignment(g)?.remove(member).unwrap_or_default();
                let key = (g.to_string(), member.to_string());
                let local = tx.state.locals.entry(key.clone()).or_insert_with(|| LocalMember {
                    cursors: BTreeMap::new(),
                    seen_generation: generation,
                    assigned: mine.clone(),
                    rotation: 0,
                });
                if local.seen_generation < generation {
                    local.seen_generation = generation;
                    if local.assigned != mine {
                        local.cursors.retain(|tp, _| mine.contains(tp));
                        local.assigned = mine;
                        return Err(BrokerError::Rebalanced {
                            group: g.to_string(),
                            member: member.to_string(),
                            generation,
                        });
                    }
                }
                let rotation = local.rotation;
                local.rotation = local.rotation.wrapping_add(1);
                let mut out = Vec::new();
                for i in 0..mine.len() {
                    if out.len() >= max_records {
                        break;
                    }
                    let tp = &mine[(rotation + i) % mine.len()];
                    let committed = tx.state.groups[g].commits.get(tp).copied().unwrap_or(0);
                    let cursor = tx.state.locals[&key].cursors.get(tp).copied().unwrap_or(0);
                    let start = committed.max(cursor);
                    let records = tx.read(&tp.topic, tp.partition, start, max_records - out.len())?;
                    let next = start + records.len() as u64;
                    tx.state
                        .locals
                        .get_mut(&key)
                        .expect("local member")
                        .cursors
                        .insert(tp.clone(), next);
                    out.extend(records);
                }
                Ok(out)
            })?;
            let now = Instant::now();
            if !batch.is_empty() || now >= deadline {
                return Ok(batch);
            }
            let wait = (deadline - now).min(WAIT_SLICE);
            guard = self
                .shared
                .arrived
                .wait_timeout(guard, wait)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn commit(
        &self,
        subscription: &Subscription,
        positions: &[CommitPosition],
    ) -> Result<(), BrokerError> {
        let g = subscription.group.as_str();
        let member = subscription.member_id.as_str();
        self.with_tx(|tx| {
            tx.load_group(g)?;
            tx.require_member(g, member)?;
            tx.touch(g, member)?;
            let mine = tx.assignment(g)?.remove(member).unwrap_or_default();
            for pos in positions {
                if pos.group != subscription.group {
                    return Err(BrokerError::InvalidArgument(format!(
                        "position for group {} committed through group {}",
                        pos.group, subscription.group
                    )));
                }
                let tp = TopicPartition::new(&pos.topic, pos.partition);
                if !mine.contains(&tp) {
                    return Err(BrokerError::NotAssigned(tp));
                }
                let end = tx.end_offset(&pos.topic, pos.partition)?;
                if pos.next_offset > end {
                    return Err(BrokerError::InvalidArgument(format!(
                        "commit {} beyond end of {tp} ({end})",
                        pos.next_offset
                    )));
                }
            }
            let commits = &mut tx.state.groups.get_mut(g).expect("loaded group").commits;
            for pos in positions {
                let slot = commits
                    .entry(TopicPartition::new(&pos.topic, pos.partition))
                    .or_insert(0);
                *slot = (*slot).max(pos.next_offset);
            }
            tx.save_commits(g)
        })
    }

    fn rebalance(&self, group: &ConsumerGroupId) -> Result<Assignment, BrokerError> {
        self.with_tx(|tx| {
            tx.load_group(group.as_str())?;
            tx.assignment(group.as_str())
        })
    }

    fn assignment(&self, subscription: &Subscription) -> Result<Vec<TopicPartition>, BrokerError> {
        let g = subscription.group.as_str();
        self.with_tx(|tx| {
            tx.load_group(g)?;
            tx.require_member(g, &subscription.member_id)?;
            Ok(tx
                .assignment(g)?
                .remove(&subscription.member_id)
                .unwrap_or_default())
        })
    }

    fn committed(
        &self,
        group: &ConsumerGroupId,
        topic: &str,
        partition: u32,
    ) -> Result<u64, BrokerError> {
        self.with_tx(|tx| {
            tx.load_group(group.as_str())?;
            Ok(tx.state.groups[group.as_str()]
                .commits
                .get(&TopicPartition::new(topic, partition))
                .copied()
                .unwrap_or(0))
        })
    }

    fn end_offset(&self, topic: &str, partition: u32) -> Result<u64, BrokerError> {
        self.with_tx(|tx| tx.end_offset(topic, partition))
    }

    fn read(
        &self,
        topic: &str,
        partition: u32,
        from_offset: u64,
        max_records: usize,
    ) -> Result<Vec<BrokerRecord>, BrokerError> {
        self.with_tx(|tx| tx.read(topic, partition, from_offset, max_records))
    }

    fn heartbeat(&self, subscription: &Subscription) -> Result<(), BrokerError> {
        let g = subscription.group.as_str();
        self.with_tx(|tx| {
            tx.load_group(g)?;
            tx.require_member(g, &subscription.member_id)?;
            tx.touch(g, &subscription.member_id)
        })
    }
}
