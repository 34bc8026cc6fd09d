use serde_json::{json, Map, Value};

use super::{number, numeric_update};
use crate::engine::behavior::{Emitter, ModelBehavior, ModelError, StepInput};
use crate::engine::manifest::ModelManifest;
use crate::engine::record::{tags, Scalar};
use crate::engine::AgentState;
use crate::rng::SplitMix64;

pub const NAME: &str = "range_sensor";

/// Private-state key holding the ids detected during the last step.
pub const DETECTIONS: &str = "detections";

pub fn manifest() -> ModelManifest {
    serde_json::from_value(json!({
        "name": NAME,
        "version": super::VERSION,
        "description": "Omnidirectional sensor with a fixed range and per-step detection probability.",
        "params": [
            {"key": "range_m", "type": "number", "required": true, "bounds": [0.0, 1.0e7]},
            {"key": "p_detect", "type": "number", "required": true, "bounds": [0.0, 1.0]}
        ],
        "emitted_tags": [{"tag": tags::DETECTION, "payload": ["target_id", "range_m", "count", "targets"]}]
    }))
    .expect("built-in manifest is well formed")
}

/// One Bernoulli draw per in-range opposing platform, in ascending target id
/// order. A step with at least one success emits a single `detection` record
/// naming the nearest detected target; all detected ids are published in the
/// sensor's private state for weapons on the same carrier.
#[derive(Debug)]
pub struct RangeSensor {
    range: f64,
    p_detect: f64,
    rng: SplitMix64,
}

impl Default for RangeSensor {
    fn default() -> Self {
        Self { range: 0.0, p_detect: 0.0, rng: SplitMix64::new(0) }
    }
}

impl ModelBehavior for RangeSensor {
    fn init(&mut self, params: &Map<String, Value>, rng: SplitMix64, state: &mut AgentState) -> Result<(), ModelError> {
        self.range = number(params, "range_m")?;
        self.p_detect = number(params, "p_detect")?;
        self.rng = rng;
        state.private.insert(DETECTIONS.into(), json!([]));
        Ok(())
    }

    fn step(&mut self, input: &StepInput<'_>, state: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError> {
        let mut detected: Vec<(&str, f64)> = Vec::new();
        for target in input.view.agents() {
            if !target.is_platform() || !state.side.opposes(target.side) {
                continue;
            }
            let range = state.position.distance(target.position);
            if range <= self.range && self.rng.bernoulli(self.p_detect) {
                detected.push((&target.agent_id, range));
            }
        }
        state.private.insert(DETECTIONS.into(), json!(detected.iter().map(|(id, _)| id).collect::<Vec<_>>()));
        if let Some(&(nearest, range)) = detected.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
            let targets = detected.iter().map(|(id, _)| *id).collect::<Vec<_>>().join(",");
            out.record(
                tags::DETECTION,
                [
                    ("target_id", Scalar::from(nearest)),
                    ("range_m", Scalar::Number(range)),
                    ("count", Scalar::Number(detected.len() as f64)),
                    ("targets", Scalar::Text(targets)),
                ],
            );
        }
        Ok(())
    }

    fn on_set_param(&mut self, keys: &[String], value: &Value, _state: &mut AgentState) -> Result<(), String> {
        let (key, x) = numeric_update(keys, value)?;
        match key {
            "range_m" if x >= 0.0 => self.range = x,
            "p_detect" if (0.0..=1.0).contains(&x) => self.p_detect = x,
            "range_m" | "p_detect" => return Err(format!("`{key}` = {x} out of range")),
            _ => return Err(format!("unknown parameter `{key}`")),
        }
        Ok(())
    }
}
