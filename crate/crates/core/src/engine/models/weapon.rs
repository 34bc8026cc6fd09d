use serde_json::{json, Map, Value};

use super::sensor::DETECTIONS;
use super::{number, numeric_update};
use crate::engine::behavior::{Emitter, ModelBehavior, ModelError, StepInput};
use crate::engine::kinematics::MissileParams;
use crate::engine::manifest::ModelManifest;
use crate::engine::record::{tags, Scalar};
use crate::engine::AgentState;
use crate::rng::SplitMix64;

pub const NAME: &str = "wez_weapon";

pub fn manifest() -> ModelManifest {
    serde_json::from_value(json!({
        "name": NAME,
        "version": super::VERSION,
        "description": "Missile launcher firing at the nearest detected opposing platform inside its launch range.",
        "params": [
            {"key": "launch_range_m", "type": "number", "required": true, "bounds": [0.0, 1.0e6]},
            {"key": "missile_speed_mps", "type": "number", "required": true, "bounds": [1.0, 1.0e4]},
            {"key": "missile_turn_rate_rad_s", "type": "number", "required": true, "bounds": [0.0, 10.0]},
            {"key": "hit_radius_m", "type": "number", "required": true, "bounds": [0.0, 1.0e5]},
            {"key": "max_flight_s", "type": "number", "required": true, "bounds": [0.0, 3600.0]},
            {"key": "shots", "type": "number", "required": true, "bounds": [0.0, 1000.0]}
        ],
        "emitted_tags": [{"tag": tags::LAUNCH, "payload": ["target_id", "missile_id", "range_m"]}]
    }))
    .expect("built-in manifest is well formed")
}

pub fn check_params(params: &Map<String, Value>) -> Vec<(String, String)> {
    match params.get("shots").and_then(Value::as_f64) {
        Some(s) if s.fract() != 0.0 => vec![("shots".into(), "must be a whole number".into())],
        _ => Vec::new(),
    }
}

/// Fires at most one missile per step, at the nearest opposing platform that a
/// sensor on the same carrier currently detects, that lies within launch range
/// and that no missile from this weapon is already chasing.
#[derive(Debug, Default)]
pub struct WezWeapon {
    launch_range: f64,
    missile: Option<MissileParams>,
    shots_left: u64,
}

impl WezWeapon {
    fn publish(&self, state: &mut AgentState) {
        state.private.insert("shots_left".into(), json!(self.shots_left));
    }
}

impl ModelBehavior for WezWeapon {
    fn init(
        &mut self,
        params: &Map<String, Value>,
        _rng: SplitMix64,
        state: &mut AgentState,
    ) -> Result<(), ModelError> {
        self.launch_range = number(params, "launch_range_m")?;
        self.missile = Some(MissileParams {
            speed_mps: number(params, "missile_speed_mps")?,
            turn_rate_rad_s: number(params, "missile_turn_rate_rad_s")?,
            hit_radius_m: number(params, "hit_radius_m")?,
            max_flight_s: number(params, "max_flight_s")?,
        });
        self.shots_left = number(params, "shots")? as u64;
        self.publish(state);
        Ok(())
    }

    fn step(&mut self, input: &StepInput<'_>, state: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError> {
        if self.shots_left == 0 {
            return Ok(());
        }
        let Some(carrier) = state.parent.as_deref() else {
            return Ok(());
        };
        let view = input.view;
        let detected: Vec<&str> = view
            .agents()
            .filter(|a| a.parent.as_deref() == Some(carrier))
            .filter_map(|a| a.private.get(DETECTIONS)?.as_array())
            .flatten()
            .filter_map(Value::as_str)
            .collect();
        let own_prefix = format!("{}.m", state.agent_id);
        let chased: Vec<&str> = view
            .agents()
            .filter(|a| a.agent_id.starts_with(&own_prefix))
            .filter_map(|a| a.private.get("target_id")?.as_str())
            .collect();
        let best = detected
            .iter()
            .filter(|id| !chased.contains(id))
            .filter_map(|id| view.get(id))
            .filter(|t| t.is_platform() && state.side.opposes(t.side))
            .map(|t| (state.position.distance(t.position), t))
            .filter(|(r, _)| *r <= self.launch_range)
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.agent_id.cmp(&b.1.agent_id)));
        if let (Some((range, target)), Some(missile)) = (best, self.missile) {
            let missile_id = out.launch_missile(&target.agent_id, missile);
            self.shots_left -= 1;
            out.record(
                tags::LAUNCH,
                [
                    ("target_id", Scalar::from(target.agent_id.as_str())),
                    ("missile_id", Scalar::Text(missile_id)),
                    ("range_m", Scalar::Number(range)),
                ],
            );
            self.publish(state);
        }
        Ok(())
    }

    fn on_set_param(&mut self, keys: &[String], value: &Value, state: &mut AgentState) -> Result<(), String> {
        let (key, x) = numeric_update(keys, value)?;
        let missile = self.missile.as_mut().ok_or("weapon not initialised")?;
        match key {
            _ if x < 0.0 => return Err(format!("`{key}` must be non-negative")),
            "launch_range_m" => self.launch_range = x,
            "missile_speed_mps" if x > 0.0 => missile.speed_mps = x,
            "missile_turn_rate_rad_s" => missile.turn_rate_rad_s = x,
            "hit_radius_m" => missile.hit_radius_m = x,
            "max_flight_s" => missile.max_flight_s = x,
            "shots" if x.fract() == 0.0 => self.shots_left = x as u64,
            _ => return Err(format!("cannot set `{key}` to {x}")),
        }
        self.publish(state);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::behavior::{PerceptionView, Spawn};
    use crate::engine::kinematics::Vec3;
    use crate::scenario::Side;

    fn weapon(shots: u64, launch_range: f64) -> (WezWeapon, AgentState) {
        let mut w = WezWeapon::default();
        let mut st = AgentState::new("b_wpn", Side::Blue, "wez_weapon/1.0");
        st.parent = Some("b".into());
        let params = json!({
            "launch_range_m": launch_range, "missile_speed_mps": 800, "missile_turn_rate_rad_s": 0.5,
            "hit_radius_m": 50, "max_flight_s": 30, "shots": shots
        });
        w.init(params.as_object().unwrap(), SplitMix64::new(0), &mut st).unwrap();
        (w, st)
    }

    fn world(detections: Value, targets: &[(&str, f64)]) -> PerceptionView {
        let mut radar = AgentState::new("b_radar", Side::Blue, "range_sensor/1.0");
        radar.parent = Some("b".into());
        radar.private.insert(DETECTIONS.into(), detections);
        let mut agents = vec![radar];
        for (id, x) in targets {
            let mut t = AgentState::new(*id, Side::Red, "waypoint_platform/1.0");
            t.position = Vec3::new(*x, 0.0, 0.0);
            agents.push(t);
        }
        PerceptionView::from_snapshot(agents.iter())
    }

    fn step(w: &mut WezWeapon, st: &mut AgentState, view: &PerceptionView) -> Emitter {
        let mut out = Emitter::new(&st.agent_id, 0);
        w.step(&StepInput { step: 1, dt: 0.1, sim_time: 0.1, view }, st, &mut out).unwrap();
        out
    }

    #[test]
    fn fires_at_nearest_detected_target_in_range() {
        let (mut w, mut st) = weapon(2, 5000.0);
        let view = world(json!(["r1", "r2"]), &[("r1", 4000.0), ("r2", 3000.0), ("r3", 100.0)]);
        let out = step(&mut w, &mut st, &view);
        assert_eq!(out.spawns().len(), 1);
        let Spawn::Missile { agent_id, target_id, .. } = &out.spawns()[0];
        assert_eq!((agent_id.as_str(), target_id.as_str()), ("b_wpn.m1", "r2"));
        assert_eq!(st.private["shots_left"], json!(1));
    }

    #[test]
    fn holds_fire_outside_range_or_without_shots() {
        let (mut w, mut st) = weapon(2, 1000.0);
        let view = world(json!(["r1"]), &[("r1", 4000.0)]);
        for _ in 0..100 {
            assert!(step(&mut w, &mut st, &view).spawns().is_empty());
        }
        let (mut w, mut st) = weapon(0, 10_000.0);
        assert!(step(&mut w, &mut st, &view).spawns().is_empty());
    }

    #[test]
    fn does_not_double_tap_a_chased_target() {
        let (mut w, mut st) = weapon(5, 10_000.0);
        let mut view_agents: Vec<AgentState> = world(json!(["r1"]), &[("r1", 4000.0)]).agents().cloned().collect();
        let mut m = AgentState::new("b_wpn.m1", Side::Blue, "missile/builtin");
        m.private.insert("target_id".into(), json!("r1"));
        view_agents.push(m);
        let view = PerceptionView::from_snapshot(view_agents.iter());
        assert!(step(&mut w, &mut st, &view).spawns().is_empty());
    }
}
