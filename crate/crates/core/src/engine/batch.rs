//! In-process execution of a whole batch, one independent run per request.

use super::registry::ModelRegistry;
use super::sim::{run_simulation, NoControl, RunOutcome, VecSink};
use crate::exec::Execution;
use crate::scenario::ExecutionRequest;
use crate::StepRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub request_id: String,
    pub outcome: RunOutcome,
    pub records: Vec<StepRecord>,
}

/// Runs every request to completion. Results keep request order whichever
/// execution mode is used.
pub fn run_local(requests: &[ExecutionRequest], registry: &ModelRegistry, exec: Execution) -> Vec<LocalRun> {
    exec.map(requests, |req| {
        let mut sink = VecSink::default();
        let outcome = run_simulation(&req.scenario, registry, &req.request_id, req.seed, &mut sink, &mut NoControl);
        LocalRun { request_id: req.request_id.clone(), outcome, records: sink.0 }
    })
}
