//! Collects statuses, results and errors into a durable task registry.

pub mod http;
mod registry;
mod store;

use std::sync::Arc;
use std::time::Duration;

use arc_swap::ArcSwap;

pub use http::{serve, HttpServer, RegistryView, TaskPage};
pub use registry::{Ingested, Registry, RegistryStats, TaskRecord, THROUGHPUT_WINDOW_MS};
pub use store::{MonitorStore, DEAD_LETTER_FILE, JOURNAL_FILE, SNAPSHOT_FILE};

use crate::agent::{self, AgentError};
use crate::broker::{ensure_topics, Broker, BrokerError, ConsumerGroupId, OffsetTracker, Subscription};
use crate::model::DeploymentConfig;

/// Records fetched per poll.
pub const POLL_BATCH: usize = 500;
/// Journal length that triggers a snapshot.
pub const SNAPSHOT_EVERY: usize = 2000;
/// File in the data directory naming a running monitor's HTTP address.
pub const ADDR_FILE: &str = "monitor.addr";

pub struct MonitorAgent {
    broker: Arc<dyn Broker>,
    group: ConsumerGroupId,
    subscription: Subscription,
    topics: Vec<String>,
    store: MonitorStore,
    registry: Registry,
    view: RegistryView,
    tracker: OffsetTracker,
}

impl MonitorAgent {
    /// Joins the configured monitor group, storing state under `datadir`.
    pub fn start(config: &DeploymentConfig, broker: Arc<dyn Broker>) -> Result<Self, AgentError> {
        let member = config.agent_name.clone().unwrap_or_else(agent::host_name);
        Self::start_as(config, broker, &config.monitor_group, &member)
    }

    pub fn start_as(
        config: &DeploymentConfig,
        broker: Arc<dyn Broker>,
        group: &str,
        member: &str,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let topic_set = config.topics();
        ensure_topics(broker.as_ref(), &topic_set)?;
        let (store, registry) = MonitorStore::open(&config.datadir, config.delivery)?;
        let group = ConsumerGroupId::new(group)?;
        let topics = topic_set.outcome_topics();
        let subscription = broker.subscribe(&group, &topics, member)?;
        log::info!("monitor {member} in group {group} resumed with {} tasks", registry.len());
        Ok(Self {
            view: Arc::new(ArcSwap::from_pointee(registry.clone())),
            broker,
            group,
            subscription,
            topics,
            store,
            registry,
            tracker: OffsetTracker::new(),
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// A handle on the registry that follows ingestion, for readers on
    /// other threads.
    pub fn view(&self) -> RegistryView {
        self.view.clone()
    }

    pub fn subscription(&self) -> &Subscription {
        &self.subscription
    }

    /// Polls once, waiting up to `timeout`. Returns how many records were
    /// applied to the registry.
    pub fn run_cycle(&mut self, timeout: Duration) -> Result<usize, AgentError> {
        Ok(self.poll_once(timeout)?.1)
    }

    /// Returns records fetched and records applied.
    fn poll_once(&mut self, timeout: Duration) -> Result<(usize, usize), AgentError> {
        let records = match self.broker.poll(&self.subscription, POLL_BATCH, timeout) {
            Err(BrokerError::Rebalanced { .. }) => {
                self.refresh_assignment()?;
                self.broker.poll(&self.subscription, POLL_BATCH, Duration::ZERO)
            }
            other => other,
        };
        let records = match records {
            Err(BrokerError::NotMember { .. }) => {
                self.rejoin()?;
                return Ok((0, 0));
            }
            other => other?,
        };
        let mut applied = 0;
        for record in &records {
            let tp = record.topic_partition();
            self.tracker.track(&tp, record.offset);
            match self.registry.ingest(record) {
                Ingested::Applied(_) => {
                    self.store.append(record)?;
                    applied += 1;
                }
                Ingested::Replayed => {}
                Ingested::DeadLetter(reason) => {
                    log::warn!("{tp}@{}: dead letter: {reason}", record.offset);
                    self.store.append(record)?;
                    self.store.dead_letter(record, &reason)?;
                }
            }
            self.tracker.settle(&tp, record.offset);
        }
        if records.is_empty() {
            return Ok((0, 0));
        }
        self.store.flush()?;
        if self.store.journaled() >= SNAPSHOT_EVERY {
            self.store.snapshot(&self.registry)?;
        }
        self.view.store(Arc::new(self.registry.clone()));
        self.commit()?;
        Ok((records.len(), applied))
    }

    /// Polls until a poll comes back empty.
    pub fn drain(&mut self) -> Result<usize, AgentError> {
        let mut total = 0;
        loop {
            let (fetched, applied) = self.poll_once(Duration::ZERO)?;
            total += applied;
            if fetched == 0 {
                return Ok(total);
            }
        }
    }

    /// Writes a snapshot and truncates the journal.
    pub fn checkpoint(&mut self) -> Result<(), AgentError> {
        self.store.snapshot(&self.registry)
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        self.registry.to_snapshot_bytes()
    }

    pub fn shutdown(mut self) -> Result<(), AgentError> {
        self.checkpoint()?;
        self.broker.unsubscribe(&self.subscription)?;
        Ok(())
    }

    fn refresh_assignment(&mut self) -> Result<(), AgentError> {
        let assigned = self.broker.assignment(&self.subscription)?;
        self.tracker.retain(&assigned);
        Ok(())
    }

    fn rejoin(&mut self) -> Result<(), AgentError> {
        self.tracker.clear();
        self.subscription = self
            .broker
            .subscribe(&self.group, &self.topics, &self.subscription.member_id)?;
        Ok(())
    }

    fn commit(&mut self) -> Result<(), AgentError> {
        let positions = self.tracker.ready_commits(&self.group);
        if positions.is_empty() {
            return Ok(());
        }
        match self.broker.commit(&self.subscription, &positions) {
            Ok(()) => self.tracker.mark_committed(&positions),
            Err(BrokerError::NotAssigned(_)) | Err(BrokerError::Rebalanced { .. }) => self.refresh_assignment()?,
            Err(BrokerError::NotMember { .. }) => self.rejoin()?,
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }
}
