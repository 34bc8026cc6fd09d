//! Worker daemon of the ASA environment.
//!
//! One process plays both worker roles: the handler keeps the manager link
//! (Hello, heartbeats, Assign/Control/Ack) and each accepted run executes on
//! its own thread, talking to the handler only through queues. Records are
//! streamed upstream in batches and kept until the manager acknowledges them.

pub mod execution;
pub mod handler;

pub use execution::{pace, IllegalTransition, Phase, RunExecution};
pub use handler::{run_node, Backoff, ConfigError, NodeConfig, NodeDaemon, Shutdown};
