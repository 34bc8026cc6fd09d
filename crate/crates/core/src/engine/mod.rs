//! Deterministic fixed-step agent simulation.
//!
//! A run advances every live agent once per step in ascending `agent_id`
//! order against a read-only snapshot of the world taken at the start of the
//! step, then flies missiles, resolves engagements and emits records. Each
//! agent draws randomness only from its own SplitMix64 stream, so trajectories
//! do not depend on declaration order.

pub mod batch;
pub mod behavior;
pub mod extension;
pub mod kinematics;
pub mod manifest;
pub mod models;
pub mod record;
pub mod registry;
mod sim;
pub mod wez;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::scenario::Side;

pub use behavior::{Emitter, ModelBehavior, ModelError, PerceptionView, Spawn, StepInput};
pub use kinematics::Vec3;
pub use manifest::ModelManifest;
pub use registry::{LoadError, ModelFactory, ModelRegistry};
pub use sim::{
    engine_invocations, engine_invocations_on_this_thread, run_simulation, ControlSource, Directive, EngineError,
    NoControl, RecordSink, RunOutcome, SetParam, Simulation, SinkError, StepReport, VecSink,
};

/// Step counter with derived simulation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub step: u64,
    pub step_dt: f64,
}

impl SimClock {
    pub fn new(step_dt: f64) -> Self {
        Self { step: 0, step_dt }
    }

    pub fn sim_time(&self) -> f64 {
        self.step as f64 * self.step_dt
    }

    pub fn time_of(&self, step: u64) -> f64 {
        step as f64 * self.step_dt
    }
}

/// Kinematic and model state of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: String,
    pub side: Side,
    pub alive: bool,
    /// ENU metres in the flat local frame.
    pub position: Vec3,
    pub speed: f64,
    /// Radians in `[0, 2π)`, 0 = east, counter-clockwise.
    pub heading: f64,
    /// Carrier agent, for mounted components.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// `name/version` of the driving model.
    pub model: String,
    #[serde(default)]
    pub private: Map<String, Value>,
}

impl AgentState {
    pub fn new(agent_id: impl Into<String>, side: Side, model: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            side,
            alive: true,
            position: Vec3::ZERO,
            speed: 0.0,
            heading: 0.0,
            parent: None,
            model: model.into(),
            private: Map::new(),
        }
    }

    pub fn model_name(&self) -> &str {
        self.model.split('/').next().unwrap_or(&self.model)
    }

    /// Top-level platforms: not mounted and not a missile.
    pub fn is_platform(&self) -> bool {
        self.parent.is_none() && self.model_name() != kinematics::MISSILE_MODEL
    }
}
