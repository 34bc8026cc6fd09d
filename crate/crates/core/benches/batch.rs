use std::f64::consts::PI;
use std::hint::black_box;

use asa_core::engine::batch::run_local;
use asa_core::engine::kinematics::MissileParams;
use asa_core::engine::registry::ModelRegistry;
use asa_core::engine::wez::{wez_envelope, FlyoutOptions, WeaponParams};
use asa_core::exec::Execution;
use asa_core::scenario::{expand_batch, ScenarioSpec, ScenarioTemplate};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn reference() -> ScenarioSpec {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference_2v1.json");
    let mut spec: ScenarioSpec = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    spec.sim.max_steps = 300;
    spec
}

fn local_batch(c: &mut Criterion) {
    let template = ScenarioTemplate { base: reference(), placeholders: Vec::new() };
    let registry = ModelRegistry::with_builtins();
    let mut group = c.benchmark_group("local_batch");
    group.sample_size(10);
    for runs in [4usize, 16] {
        let requests = expand_batch(&template, &vec![Default::default(); runs], 7, "bench").unwrap();
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, runs), &requests, |b, reqs| {
                b.iter(|| black_box(run_local(reqs, &registry, mode)))
            });
        }
    }
    group.finish();
}

fn envelope(c: &mut Criterion) {
    let weapon = WeaponParams {
        launch_range_m: 20_000.0,
        missile: MissileParams { speed_mps: 800.0, turn_rate_rad_s: 0.5, hit_radius_m: 50.0, max_flight_s: 30.0 },
    };
    let speeds: Vec<f64> = (0..8).map(|i| i as f64 * 50.0).collect();
    let aspects: Vec<f64> = (0..8).map(|i| i as f64 * PI / 7.0).collect();
    let mut group = c.benchmark_group("wez_envelope");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(wez_envelope(&weapon, &speeds, &aspects, FlyoutOptions::default(), mode)))
        });
    }
    group.finish();
}

criterion_group!(benches, local_batch, envelope);
criterion_main!(benches);
