use serde_json::{json, Map, Value};

use super::{number, numeric_update, point, points};
use crate::engine::behavior::{Emitter, ModelBehavior, ModelError, StepInput};
use crate::engine::kinematics::{turn_toward, wrap_tau, Vec3};
use crate::engine::manifest::ModelManifest;
use crate::engine::record::Scalar;
use crate::engine::AgentState;
use crate::rng::SplitMix64;

pub const NAME: &str = "waypoint_platform";
pub const MAX_SPEED: f64 = 3000.0;

pub fn manifest() -> ModelManifest {
    serde_json::from_value(json!({
        "name": NAME,
        "version": super::VERSION,
        "description": "Constant-speed platform steering through ENU waypoints with a turn-rate limit.",
        "params": [
            {"key": "position", "type": "list", "required": true},
            {"key": "heading_rad", "type": "number", "default": 0.0, "bounds": [0.0, std::f64::consts::TAU]},
            {"key": "speed_mps", "type": "number", "required": true, "bounds": [0.0, MAX_SPEED]},
            {"key": "max_turn_rate_rad_s", "type": "number", "required": true, "bounds": [0.0, 10.0]},
            {"key": "waypoints", "type": "list", "default": []},
            {"key": "capture_radius_m", "type": "number", "default": 100.0, "bounds": [0.0, 1.0e6]},
            {"key": "climb_rate_mps", "type": "number", "default": 50.0, "bounds": [0.0, 1000.0]}
        ],
        "accepted_components": ["range_sensor", "wez_weapon"],
        "emitted_tags": [{"tag": "waypoint_reached", "payload": ["index"]}]
    }))
    .expect("built-in manifest is well formed")
}

pub fn check_params(params: &Map<String, Value>) -> Vec<(String, String)> {
    let mut problems = Vec::new();
    if let Some(p) = params.get("position") {
        match point(p) {
            Some(v) if v.z >= 0.0 => {}
            _ => problems.push(("position".into(), "must be [x, y, z] with z >= 0".into())),
        }
    }
    if let Some(w) = params.get("waypoints") {
        match points(w) {
            Some(ps) if ps.iter().all(|p| p.z >= 0.0) => {}
            _ => problems.push(("waypoints".into(), "must be a list of [x, y, z] with z >= 0".into())),
        }
    }
    problems
}

#[derive(Debug, Default)]
pub struct WaypointPlatform {
    max_turn_rate: f64,
    waypoints: Vec<Vec3>,
    next: usize,
    capture_radius: f64,
    climb_rate: f64,
}

impl WaypointPlatform {
    fn publish(&self, state: &mut AgentState) {
        state.private.insert("waypoint_index".into(), json!(self.next));
    }
}

impl ModelBehavior for WaypointPlatform {
    fn init(
        &mut self,
        params: &Map<String, Value>,
        _rng: SplitMix64,
        state: &mut AgentState,
    ) -> Result<(), ModelError> {
        state.position = params
            .get("position")
            .and_then(point)
            .ok_or_else(|| ModelError::new("param `position` must be [x, y, z]"))?;
        state.heading = wrap_tau(number(params, "heading_rad")?);
        state.speed = number(params, "speed_mps")?;
        self.max_turn_rate = number(params, "max_turn_rate_rad_s")?;
        self.waypoints = params
            .get("waypoints")
            .and_then(points)
            .ok_or_else(|| ModelError::new("param `waypoints` must be a list of [x, y, z]"))?;
        self.capture_radius = number(params, "capture_radius_m")?;
        self.climb_rate = number(params, "climb_rate_mps")?;
        self.next = 0;
        self.publish(state);
        Ok(())
    }

    fn step(&mut self, input: &StepInput<'_>, state: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError> {
        let dt = input.dt;
        let speed = state.speed;
        let mut vz = 0.0;
        if let Some(&wp) = self.waypoints.get(self.next) {
            let to = wp - state.position;
            if to.horizontal_norm() > 0.0 {
                state.heading = turn_toward(state.heading, to.y.atan2(to.x), self.max_turn_rate * dt);
            }
            vz = (to.z / dt).clamp(-self.climb_rate, self.climb_rate).clamp(-speed, speed);
        }
        // speed is the 3-D speed; climbing borrows from the horizontal component
        let horizontal = (speed * speed - vz * vz).max(0.0).sqrt();
        state.position += Vec3::new(horizontal * state.heading.cos(), horizontal * state.heading.sin(), vz) * dt;
        state.position.z = state.position.z.max(0.0);

        if let Some(&wp) = self.waypoints.get(self.next) {
            if (wp - state.position).horizontal_norm() < self.capture_radius {
                out.record("waypoint_reached", [("index", Scalar::Number(self.next as f64))]);
                self.next += 1;
            }
        }
        self.publish(state);
        Ok(())
    }

    fn on_set_param(&mut self, keys: &[String], value: &Value, state: &mut AgentState) -> Result<(), String> {
        if keys == ["waypoints"] {
            let wps = points(value).ok_or("`waypoints` must be a list of [x, y, z]")?;
            if wps.iter().any(|p| p.z < 0.0) {
                return Err("waypoint below ground".into());
            }
            self.waypoints = wps;
            self.next = 0;
            self.publish(state);
            return Ok(());
        }
        let (key, x) = numeric_update(keys, value)?;
        match key {
            "speed_mps" if (0.0..=MAX_SPEED).contains(&x) => state.speed = x,
            "max_turn_rate_rad_s" if x >= 0.0 => self.max_turn_rate = x,
            "capture_radius_m" if x >= 0.0 => self.capture_radius = x,
            "climb_rate_mps" if x >= 0.0 => self.climb_rate = x,
            "speed_mps" | "max_turn_rate_rad_s" | "capture_radius_m" | "climb_rate_mps" => {
                return Err(format!("`{key}` = {x} out of range"))
            }
            _ => return Err(format!("`{key}` cannot be changed during a run")),
        }
        Ok(())
    }
}
