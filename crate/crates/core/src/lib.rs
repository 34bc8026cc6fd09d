//! Core of the ASA constructive-simulation environment.
//!
//! * [`protocol`]: framed wire messages exchanged by manager, handlers and nodes.
//! * [`scenario`]: scenario documents, templates, batch expansion and design of experiments.
//! * [`engine`]: the deterministic fixed-step agent simulation, built-in models and extensions.
//! * [`datastore`]: catalog and per-run record logs on disk.
//! * [`analysis`]: metric extraction and statistical aggregation over batches.
//!
//! Data-parallel loops (local batch execution, WEZ sweeps) run on
//! rayon when the `parallel` feature is enabled and fall back to plain iterators
//! otherwise. See [`exec::Execution`].

pub mod analysis;
pub mod canonical;
pub mod datastore;
pub mod engine;
pub mod exec;
pub mod protocol;
pub mod rng;
pub mod scenario;

pub use engine::record::{Scalar, StepRecord};
