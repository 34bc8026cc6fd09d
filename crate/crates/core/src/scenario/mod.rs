//! Scenario documents, validation against the model registry, placeholder
//! templates, batch expansion and design-of-experiments generators.

mod doe;
mod path;
mod template;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::engine::registry::ModelRegistry;

pub use doe::{full_factorial, latin_hypercube, DoeError, DoeSpec, Factor, FactorRange};
pub use path::{ParamPath, PathError};
pub use template::{
    expand_batch, resolve, BatchOrigin, BindingSet, ExecutionRequest, IndexedError, Placeholder, PlaceholderKind,
    ResolveError, ScenarioTemplate, TemplateError,
};

/// Deepest allowed component nesting below a top-level agent.
pub const MAX_COMPONENT_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Side {
    Blue,
    Red,
    Neutral,
}

impl Side {
    /// BLUE and RED oppose each other; NEUTRAL opposes nobody.
    pub fn opposes(self, other: Side) -> bool {
        matches!((self, other), (Side::Blue, Side::Red) | (Side::Red, Side::Blue))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Blue => "BLUE",
            Side::Red => "RED",
            Side::Neutral => "NEUTRAL",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub name: String,
    pub version: String,
}

impl ModelRef {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self { name: name.into(), version: version.into() }
    }
}

impl fmt::Display for ModelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub step_dt: f64,
    pub max_steps: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub agent_id: String,
    pub side: Side,
    pub model: ModelRef,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub components: Vec<AgentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub sim: SimSettings,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
}

impl ScenarioSpec {
    /// Every agent with its carrier (if any) and nesting depth, depth-first in declaration order.
    pub fn walk(&self) -> Vec<(&AgentSpec, Option<&str>, usize)> {
        fn go<'a>(
            agents: &'a [AgentSpec],
            parent: Option<&'a str>,
            depth: usize,
            out: &mut Vec<(&'a AgentSpec, Option<&'a str>, usize)>,
        ) {
            for a in agents {
                out.push((a, parent, depth));
                go(&a.components, Some(&a.agent_id), depth + 1, out);
            }
        }
        let mut out = Vec::new();
        go(&self.agents, None, 0, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationError {
    #[error("bad sim block: {field} {reason}")]
    BadSim { field: String, reason: String },
    #[error("duplicate agent id `{agent_id}`")]
    DuplicateAgentId { agent_id: String },
    #[error("invalid agent id `{agent_id}` (use letters, digits, `_` or `-`)")]
    InvalidAgentId { agent_id: String },
    #[error("agent `{agent_id}` references unknown model {model}")]
    UnknownModel { agent_id: String, model: String },
    #[error("agent `{agent_id}` nested {depth} levels deep (max {MAX_COMPONENT_DEPTH})")]
    NestingTooDeep { agent_id: String, depth: usize },
    #[error("model of `{carrier}` does not accept component `{agent_id}` ({model})")]
    ComponentNotAccepted { agent_id: String, carrier: String, model: String },
    #[error("agent `{agent_id}` is missing required param `{key}`")]
    MissingParam { agent_id: String, key: String },
    #[error("agent `{agent_id}` sets undeclared param `{key}`")]
    UnknownParam { agent_id: String, key: String },
    #[error("param `{key}` of `{agent_id}` must be a {expected}")]
    ParamType { agent_id: String, key: String, expected: String },
    #[error("param `{key}` of `{agent_id}` = {value} outside [{lo}, {hi}]")]
    ParamOutOfBounds { agent_id: String, key: String, value: f64, lo: f64, hi: f64 },
    #[error("param `{key}` of `{agent_id}`: {reason}")]
    InvalidParam { agent_id: String, key: String, reason: String },
}

pub(crate) fn valid_agent_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Checks `spec` against every structural rule and the registry's manifests.
/// Returns all violations, not just the first.
pub fn validate(spec: &ScenarioSpec, registry: &ModelRegistry) -> Result<(), Vec<ValidationError>> {
    let mut errors = Vec::new();
    if !(spec.sim.step_dt.is_finite() && spec.sim.step_dt > 0.0) {
        errors.push(ValidationError::BadSim {
            field: "step_dt".into(),
            reason: "must be a positive number of seconds".into(),
        });
    }
    if spec.sim.max_steps < 1 {
        errors.push(ValidationError::BadSim { field: "max_steps".into(), reason: "must be at least 1".into() });
    }

    let mut seen = BTreeSet::new();
    let walk = spec.walk();
    let by_id: std::collections::HashMap<&str, &AgentSpec> =
        walk.iter().map(|(a, _, _)| (a.agent_id.as_str(), *a)).collect();
    for (agent, parent, depth) in &walk {
        let id = agent.agent_id.as_str();
        if !seen.insert(id) {
            errors.push(ValidationError::DuplicateAgentId { agent_id: id.into() });
        }
        if !valid_agent_id(id) {
            errors.push(ValidationError::InvalidAgentId { agent_id: id.into() });
        }
        if *depth > MAX_COMPONENT_DEPTH {
            errors.push(ValidationError::NestingTooDeep { agent_id: id.into(), depth: *depth });
        }
        let Some(model) = registry.get(&agent.model) else {
            errors.push(ValidationError::UnknownModel { agent_id: id.into(), model: agent.model.to_string() });
            continue;
        };
        if let Some(carrier) = parent.and_then(|p| by_id.get(p)) {
            if let Some(carrier_model) = registry.get(&carrier.model) {
                if !carrier_model.manifest.accepted_components.contains(&agent.model.name) {
                    errors.push(ValidationError::ComponentNotAccepted {
                        agent_id: id.into(),
                        carrier: carrier.agent_id.clone(),
                        model: agent.model.to_string(),
                    });
                }
            }
        }
        check_params(agent, model, &mut errors);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn check_params(
    agent: &AgentSpec,
    model: &crate::engine::registry::RegisteredModel,
    errors: &mut Vec<ValidationError>,
) {
    let id = &agent.agent_id;
    let manifest = &model.manifest;
    for decl in &manifest.params {
        match agent.params.get(&decl.key) {
            None if decl.required => {
                errors.push(ValidationError::MissingParam { agent_id: id.clone(), key: decl.key.clone() })
            }
            None => {}
            Some(v) if !decl.ty.admits(v) => errors.push(ValidationError::ParamType {
                agent_id: id.clone(),
                key: decl.key.clone(),
                expected: decl.ty.to_string(),
            }),
            Some(v) => {
                if let (Some([lo, hi]), Some(x)) = (decl.bounds, v.as_f64()) {
                    if !(lo..=hi).contains(&x) {
                        errors.push(ValidationError::ParamOutOfBounds {
                            agent_id: id.clone(),
                            key: decl.key.clone(),
                            value: x,
                            lo,
                            hi,
                        });
                    }
                }
            }
        }
    }
    for key in agent.params.keys() {
        if manifest.param(key).is_none() {
            errors.push(ValidationError::UnknownParam { agent_id: id.clone(), key: key.clone() });
        }
    }
    for (key, reason) in model.check_params(&agent.params) {
        errors.push(ValidationError::InvalidParam { agent_id: id.clone(), key, reason });
    }
}
