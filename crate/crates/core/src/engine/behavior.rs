//! The contract between the engine and a model implementation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::kinematics::MissileParams;
use super::record::{Payload, Scalar};
use super::AgentState;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{0}")]
pub struct ModelError(pub String);

impl ModelError {
    pub fn new(msg: impl Into<String>) -> Self {
        ModelError(msg.into())
    }
}

/// Read-only view of the live agents as they were at the start of the step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerceptionView {
    agents: BTreeMap<String, AgentState>,
}

impl PerceptionView {
    /// Builds a view from a snapshot, dropping agents that are not alive.
    pub fn from_snapshot<'a>(states: impl IntoIterator<Item = &'a AgentState>) -> Self {
        Self { agents: states.into_iter().filter(|a| a.alive).map(|a| (a.agent_id.clone(), a.clone())).collect() }
    }

    pub fn get(&self, agent_id: &str) -> Option<&AgentState> {
        self.agents.get(agent_id)
    }

    /// Live agents in ascending `agent_id` order.
    pub fn agents(&self) -> impl Iterator<Item = &AgentState> {
        self.agents.values()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// The step being computed.
    pub step: u64,
    pub dt: f64,
    /// Simulation time at the end of this step.
    pub sim_time: f64,
    pub view: &'a PerceptionView,
}

/// Something a model asks the engine to create at the end of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spawn {
    Missile { agent_id: String, target_id: String, missile: MissileParams },
}

/// Collects the outputs of one model step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Emitter {
    agent_id: String,
    next_spawn: u64,
    records: Vec<(String, Payload)>,
    spawns: Vec<Spawn>,
    terminate: bool,
}

impl Emitter {
    /// `spawned_so_far` is how many agents this agent has spawned in the run.
    pub fn new(agent_id: impl Into<String>, spawned_so_far: u64) -> Self {
        Self {
            agent_id: agent_id.into(),
            next_spawn: spawned_so_far + 1,
            records: Vec::new(),
            spawns: Vec::new(),
            terminate: false,
        }
    }

    /// Records the agent's state under `tag` for this step.
    pub fn record<K, I>(&mut self, tag: &str, payload: I)
    where
        K: Into<String>,
        I: IntoIterator<Item = (K, Scalar)>,
    {
        let payload = payload.into_iter().map(|(k, v)| (k.into(), v)).collect();
        self.records.push((tag.to_owned(), payload));
    }

    /// Requests a missile launch; returns the id the missile will carry.
    pub fn launch_missile(&mut self, target_id: &str, missile: MissileParams) -> String {
        let agent_id = format!("{}.m{}", self.agent_id, self.next_spawn);
        self.next_spawn += 1;
        self.spawns.push(Spawn::Missile { agent_id: agent_id.clone(), target_id: target_id.to_owned(), missile });
        agent_id
    }

    /// Ends the run after the current step completes.
    pub fn request_termination(&mut self) {
        self.terminate = true;
    }

    pub fn records(&self) -> &[(String, Payload)] {
        &self.records
    }

    pub fn spawns(&self) -> &[Spawn] {
        &self.spawns
    }

    pub fn terminate_requested(&self) -> bool {
        self.terminate
    }

    pub(crate) fn into_parts(self) -> (Vec<(String, Payload)>, Vec<Spawn>, bool) {
        (self.records, self.spawns, self.terminate)
    }
}

/// Behaviour of one agent. Implementations mutate only the state they are
/// handed; the rest of the world is visible through the perception view only.
pub trait ModelBehavior: Send {
    /// Called once before step 1 with the effective params (manifest defaults
    /// applied) and the agent's private random stream.
    fn init(&mut self, params: &Map<String, Value>, rng: SplitMix64, state: &mut AgentState) -> Result<(), ModelError>;

    fn step(&mut self, input: &StepInput<'_>, state: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError>;

    /// Applies a mid-run parameter change addressed by `keys` below `params`.
    /// An `Err` is recorded as a rejected change; the run continues.
    fn on_set_param(&mut self, keys: &[String], value: &Value, state: &mut AgentState) -> Result<(), String>;
}
