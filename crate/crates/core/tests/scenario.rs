use std::collections::BTreeSet;

use asa_core::canonical;
use asa_core::rng::derive_seed;
use asa_core::scenario::{
    expand_batch, full_factorial, latin_hypercube, resolve, Factor, FactorRange, ScenarioTemplate,
};
use proptest::prelude::*;
use serde_json::{json, Value};

fn template(placeholders: Value) -> ScenarioTemplate {
    serde_json::from_value(json!({
        "base": {
            "name": "t", "sim": {"step_dt": 0.1, "max_steps": 10},
            "agents": [{
                "agent_id": "blue1", "side": "BLUE", "model": {"name": "waypoint_platform", "version": "1.0"},
                "params": {"position": [0, 0, 0], "speed_mps": 200.0, "max_turn_rate_rad_s": 0.1, "capture_radius_m": 100.0},
                "components": [{"agent_id": "radar", "side": "BLUE", "model": {"name": "range_sensor", "version": "1.0"},
                                "params": {"range_m": 1000.0, "p_detect": 0.5}}]
            }]
        },
        "placeholders": placeholders
    }))
    .unwrap()
}

/// Leaves of a JSON tree as `(path, value)` pairs.
fn leaves(v: &Value, path: String, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| leaves(v, format!("{path}/{k}"), out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| leaves(v, format!("{path}/{i}"), out)),
        _ => out.push((path, v.clone())),
    }
}

fn diff(a: &Value, b: &Value) -> Vec<String> {
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    leaves(a, String::new(), &mut la);
    leaves(b, String::new(), &mut lb);
    let sa: BTreeSet<_> = la.iter().map(|(p, v)| (p.clone(), canonical::to_string(v))).collect();
    let sb: BTreeSet<_> = lb.iter().map(|(p, v)| (p.clone(), canonical::to_string(v))).collect();
    sa.symmetric_difference(&sb).map(|(p, _)| p.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

proptest! {
    #[test]
    fn resolve_touches_only_bound_leaves(speed in 0.0f64..3000.0, pd in 0.0f64..=1.0, cap in 0.0f64..1000.0, mask in 0u8..8) {
        let all = [
            ("speed", "agents.blue1.params.speed_mps", json!(speed), "/agents/0/params/speed_mps"),
            ("pd", "agents.blue1.components.radar.params.p_detect", json!(pd), "/agents/0/components/0/params/p_detect"),
            ("cap", "agents.blue1.params.capture_radius_m", json!(cap), "/agents/0/params/capture_radius_m"),
        ];
        let chosen: Vec<_> = all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, p)| p).collect();
        let t = template(Value::Array(chosen.iter().map(|(n, p, _, _)| json!({"name": n, "path": p, "kind": "number"})).collect()));
        let binding = chosen.iter().map(|(n, _, v, _)| (n.to_string(), v.clone())).collect();
        let resolved = resolve(&t, &binding).unwrap();
        let base = canonical::to_value(&t.base);
        let out: Value = serde_json::from_str(&canonical::to_string(&resolved)).unwrap();
        let mut expected: Vec<String> = chosen
            .iter()
            .filter(|(_, _, v, leaf)| base.pointer(leaf) != Some(v))
            .map(|(_, _, _, leaf)| leaf.to_string())
            .collect();
        expected.sort();
        prop_assert_eq!(diff(&base, &out), expected);
        for (_, _, v, leaf) in &chosen {
            prop_assert_eq!(out.pointer(leaf), Some(v));
        }
    }

    #[test]
    fn expansion_length_and_seeds(n in 0usize..40, seed in any::<u64>()) {
        let t = template(json!([{"name": "speed", "path": "agents.blue1.params.speed_mps", "kind": "number"}]));
        let bindings: Vec<_> = (0..n).map(|i| [("speed".to_owned(), json!(i as f64))].into()).collect();
        let reqs = expand_batch(&t, &bindings, seed, "b").unwrap();
        prop_assert_eq!(reqs.len(), n);
        let seeds: BTreeSet<u64> = reqs.iter().map(|r| r.seed).collect();
        prop_assert_eq!(seeds.len(), n);
        for (i, r) in reqs.iter().enumerate() {
            prop_assert_eq!(r.seed, derive_seed(seed, i as u64));
            prop_assert_eq!(r.origin.index, i as u64);
        }
    }

    #[test]
    fn hypercube_stratifies_every_dimension(n in 1usize..50, seed in any::<u64>()) {
        let ranges = vec![
            FactorRange { name: "a".into(), lo: -5.0, hi: 5.0 },
            FactorRange { name: "b".into(), lo: 100.0, hi: 400.0 },
        ];
        let design = latin_hypercube(n, &ranges, seed).unwrap();
        prop_assert_eq!(design.len(), n);
        for r in &ranges {
            let width = (r.hi - r.lo) / n as f64;
            let mut strata: Vec<usize> = design
                .iter()
                .map(|b| ((b[&r.name].as_f64().unwrap() - r.lo) / width).floor() as usize)
                .collect();
            strata.sort_unstable();
            prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn factorial_three_by_four_by_two() {
    let factors = vec![
        Factor { name: "a".into(), values: vec![json!(1), json!(2), json!(3)] },
        Factor { name: "b".into(), values: vec![json!("w"), json!("x"), json!("y"), json!("z")] },
        Factor { name: "c".into(), values: vec![json!(true), json!(false)] },
    ];
    let rows = full_factorial(&factors).unwrap();
    assert_eq!(rows.len(), 24);
    let distinct: BTreeSet<String> = rows.iter().map(canonical::to_string).collect();
    assert_eq!(distinct.len(), 24);
}

#[test]
fn seed_distinctness_for_a_thousand_indices() {
    let seeds: BTreeSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
    assert_eq!(seeds.len(), 1000);
}
