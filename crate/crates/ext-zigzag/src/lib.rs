//! A platform that flies straight legs of fixed duration, alternating left and
//! right of a base heading. Built as a separate executable and loaded through
//! its manifest, it doubles as a template for writing extension models.

use asa_core::engine::kinematics::{wrap_tau, Vec3};
use asa_core::engine::record::Scalar;
use asa_core::engine::{AgentState, Emitter, ModelBehavior, ModelError, ModelManifest, StepInput};
use asa_core::rng::SplitMix64;
use serde_json::{json, Map, Value};

pub const NAME: &str = "zigzag_platform";
pub const VERSION: &str = "1.0";

pub fn manifest() -> ModelManifest {
    serde_json::from_value(json!({
        "name": NAME,
        "version": VERSION,
        "description": "Constant-speed platform alternating between two headings every leg.",
        "params": [
            {"key": "position", "type": "list", "required": true},
            {"key": "base_heading_rad", "type": "number", "default": 0.0, "bounds": [0.0, std::f64::consts::TAU]},
            {"key": "speed_mps", "type": "number", "required": true, "bounds": [0.0, 3000.0]},
            {"key": "amplitude_rad", "type": "number", "default": 0.5, "bounds": [0.0, 1.5]},
            {"key": "leg_s", "type": "number", "default": 10.0, "bounds": [0.1, 3600.0]}
        ],
        "emitted_tags": [{"tag": "leg_change", "payload": ["leg", "heading_rad"]}],
        "artifact": "zigzag-ext"
    }))
    .expect("manifest is well formed")
}

#[derive(Debug, Default)]
pub struct Zigzag {
    base: f64,
    amplitude: f64,
    leg_s: f64,
    leg: u64,
}

fn number(params: &Map<String, Value>, key: &str) -> Result<f64, ModelError> {
    params.get(key).and_then(Value::as_f64).ok_or_else(|| ModelError::new(format!("`{key}` must be a number")))
}

impl Zigzag {
    fn heading_for(&self, leg: u64) -> f64 {
        let side = if leg.is_multiple_of(2) { 1.0 } else { -1.0 };
        wrap_tau(self.base + side * self.amplitude)
    }
}

impl ModelBehavior for Zigzag {
    fn init(
        &mut self,
        params: &Map<String, Value>,
        _rng: SplitMix64,
        state: &mut AgentState,
    ) -> Result<(), ModelError> {
        let position = params
            .get("position")
            .and_then(|p| serde_json::from_value::<[f64; 3]>(p.clone()).ok())
            .ok_or_else(|| ModelError::new("`position` must be [x, y, z]"))?;
        self.base = number(params, "base_heading_rad")?;
        self.amplitude = number(params, "amplitude_rad")?;
        self.leg_s = number(params, "leg_s")?;
        state.position = Vec3::from(position);
        state.speed = number(params, "speed_mps")?;
        state.heading = self.heading_for(0);
        state.private.insert("leg".into(), json!(0));
        Ok(())
    }

    fn step(&mut self, input: &StepInput<'_>, state: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError> {
        let leg = ((input.sim_time - input.dt) / self.leg_s + 1e-9).floor().max(0.0) as u64;
        if leg != self.leg {
            self.leg = leg;
            state.heading = self.heading_for(leg);
            state.private.insert("leg".into(), json!(leg));
            out.record(
                "leg_change",
                [("leg", Scalar::Number(leg as f64)), ("heading_rad", Scalar::Number(state.heading))],
            );
        }
        let (s, c) = state.heading.sin_cos();
        state.position += Vec3::new(c, s, 0.0) * (state.speed * input.dt);
        Ok(())
    }

    fn on_set_param(&mut self, keys: &[String], value: &Value, state: &mut AgentState) -> Result<(), String> {
        let x = value.as_f64().ok_or("value must be a number")?;
        match keys {
            [k] if k == "speed_mps" && (0.0..=3000.0).contains(&x) => state.speed = x,
            [k] if k == "amplitude_rad" && (0.0..=1.5).contains(&x) => self.amplitude = x,
            _ => return Err(format!("cannot set `{}` to {x}", keys.join("."))),
        }
        Ok(())
    }
}
