//! Step records: the tagged per-step agent state that is streamed, stored and replayed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A flat payload value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Scalar::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl From<f64> for Scalar {
    fn from(x: f64) -> Self {
        Scalar::Number(x)
    }
}

impl From<bool> for Scalar {
    fn from(b: bool) -> Self {
        Scalar::Bool(b)
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Text(s.to_owned())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Text(s)
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Number(x) => write!(f, "{x}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

pub type Payload = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    // Fields are declared in key order so plain serialization is canonical.
    pub agent_id: String,
    pub payload: Payload,
    pub run_id: String,
    pub sim_time: f64,
    pub step: u64,
    pub tag: String,
}

impl StepRecord {
    /// Ordering and identity key within a run.
    pub fn key(&self) -> (u64, &str, &str) {
        (self.step, &self.agent_id, &self.tag)
    }
}

/// Tags emitted by the engine itself rather than by a model.
pub mod tags {
    pub const STATUS: &str = "status";
    pub const HIT: &str = "hit";
    pub const MISS: &str = "miss";
    pub const PARAM_REJECTED: &str = "param_rejected";
    pub const LAUNCH: &str = "launch";
    pub const DETECTION: &str = "detection";

    pub const ENGINE: [&str; 4] = [STATUS, HIT, MISS, PARAM_REJECTED];
}
