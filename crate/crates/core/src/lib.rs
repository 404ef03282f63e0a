pub mod agent;
pub mod broker;
pub mod clock;
pub mod cluster_agent;
pub mod model;
pub mod monitor;
pub mod runner;
pub mod scheduler;
pub mod submitter;
pub mod worker_agent;
