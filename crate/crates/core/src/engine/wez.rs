//! Maximum launch range of the built-in missile against a constant-velocity
//! target, by bisection over single-shot fly-outs.

use serde::{Deserialize, Serialize};

use super::kinematics::{Flight, FlightStatus, MissileParams, Vec3};
use crate::exec::Execution;

/// Weapon parameters relevant to the envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeaponParams {
    pub launch_range_m: f64,
    pub missile: MissileParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlyoutOptions {
    pub dt: f64,
    /// Granularity of the returned range.
    pub resolution_m: f64,
}

impl Default for FlyoutOptions {
    fn default() -> Self {
        Self { dt: 0.1, resolution_m: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlyoutResult {
    pub hit: bool,
    pub steps: u64,
    /// Closest approach on the final step.
    pub final_distance_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum WezError {
    #[error("no hit even at point-blank range")]
    NoHitAtAnyRange,
}

/// Flies one missile from the origin at a target starting `range_m` due east,
/// moving at `target_speed` on heading `aspect` (0 = straight away from the
/// launcher, π = straight at it).
pub fn fly_out(missile: &MissileParams, target_speed: f64, aspect: f64, range_m: f64, dt: f64) -> FlyoutResult {
    let target_velocity = Vec3::new(aspect.cos(), aspect.sin(), 0.0) * target_speed;
    let mut target = Vec3::new(range_m, 0.0, 0.0);
    let mut flight = Flight::launch(*missile, Vec3::ZERO, target);
    if range_m == 0.0 {
        flight.heading = 0.0;
    }
    loop {
        let next = target + target_velocity * dt;
        let status = flight.advance(target, next, dt);
        target = next;
        match status {
            FlightStatus::InFlight => continue,
            FlightStatus::Hit { miss_distance_m } => {
                return FlyoutResult { hit: true, steps: flight.flown_steps, final_distance_m: miss_distance_m }
            }
            FlightStatus::Timeout => {
                return FlyoutResult {
                    hit: false,
                    steps: flight.flown_steps,
                    final_distance_m: flight.position.distance(target),
                }
            }
        }
    }
}

/// Largest initial range in `[0, 2·launch_range_m]` that still hits, as a
/// multiple of the resolution (or the upper bound itself).
///
/// Candidates sit on a fixed grid, so for a hit region that shrinks with
/// target speed the estimate shrinks too.
pub fn estimate_wez_max_range(
    target_speed: f64,
    aspect: f64,
    weapon: &WeaponParams,
    opts: FlyoutOptions,
) -> Result<f64, WezError> {
    let upper = 2.0 * weapon.launch_range_m;
    let count = (upper / opts.resolution_m).ceil() as u64;
    let candidate = |k: u64| (k as f64 * opts.resolution_m).min(upper);
    let hits = |k: u64| fly_out(&weapon.missile, target_speed, aspect, candidate(k), opts.dt).hit;
    if !hits(0) {
        return Err(WezError::NoHitAtAnyRange);
    }
    if hits(count) {
        return Ok(candidate(count));
    }
    let (mut lo, mut hi) = (0, count);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if hits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(candidate(lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub target_speed: f64,
    pub aspect: f64,
    pub max_range_m: Option<f64>,
}

/// Evaluates the estimator over a speed × aspect grid, row-major by speed.
pub fn wez_envelope(
    weapon: &WeaponParams,
    speeds: &[f64],
    aspects: &[f64],
    opts: FlyoutOptions,
    exec: Execution,
) -> Vec<EnvelopePoint> {
    exec.map_range(speeds.len() * aspects.len(), |i| {
        let (target_speed, aspect) = (speeds[i / aspects.len()], aspects[i % aspects.len()]);
        EnvelopePoint {
            target_speed,
            aspect,
            max_range_m: estimate_wez_max_range(target_speed, aspect, weapon, opts).ok(),
        }
    })
}
