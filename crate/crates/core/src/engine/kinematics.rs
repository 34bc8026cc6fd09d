//! Vectors, angle helpers and the pure-pursuit missile used by both the
//! engine and the WEZ fly-out.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

pub const MISSILE_MODEL: &str = "missile";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn horizontal_norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Vec3 { x, y, z }
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_pi(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_tau(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Turns `current` toward `desired` by at most `max_step` radians.
pub fn turn_toward(current: f64, desired: f64, max_step: f64) -> f64 {
    let diff = wrap_pi(desired - current);
    wrap_tau(current + diff.clamp(-max_step, max_step))
}

/// Minimum distance between two points moving linearly over the same interval,
/// one from `a0` to `a1` and the other from `b0` to `b1`.
pub fn closest_approach(a0: Vec3, a1: Vec3, b0: Vec3, b1: Vec3) -> f64 {
    let r0 = a0 - b0;
    let d = (a1 - b1) - r0;
    let dd = d.dot(d);
    let t = if dd > 0.0 { (-r0.dot(d) / dd).clamp(0.0, 1.0) } else { 0.0 };
    (r0 + d * t).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissileParams {
    pub speed_mps: f64,
    pub turn_rate_rad_s: f64,
    pub hit_radius_m: f64,
    pub max_flight_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlightStatus {
    InFlight,
    Hit { miss_distance_m: f64 },
    Timeout,
}

/// A missile flying pure pursuit: heading and flight-path angle turn toward the
/// target's current position at no more than the turn rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flight {
    pub params: MissileParams,
    pub position: Vec3,
    pub heading: f64,
    pub pitch: f64,
    pub flown_steps: u64,
}

impl Flight {
    /// A missile at `position` pointed straight at `target`.
    pub fn launch(params: MissileParams, position: Vec3, target: Vec3) -> Self {
        let los = target - position;
        Flight {
            params,
            position,
            heading: wrap_tau(los.y.atan2(los.x)),
            pitch: los.z.atan2(los.horizontal_norm()),
            flown_steps: 0,
        }
    }

    pub fn velocity(&self) -> Vec3 {
        let v = self.params.speed_mps;
        Vec3::new(
            v * self.pitch.cos() * self.heading.cos(),
            v * self.pitch.cos() * self.heading.sin(),
            v * self.pitch.sin(),
        )
    }

    /// Advances one step. `target_before` is where the target was at the start
    /// of the step (and what the seeker steers toward); `target_after` is where
    /// it ended up. A hit is scored when the closest approach during the step
    /// falls inside the hit radius.
    pub fn advance(&mut self, target_before: Vec3, target_after: Vec3, dt: f64) -> FlightStatus {
        let los = target_before - self.position;
        let max_turn = self.params.turn_rate_rad_s * dt;
        if los.horizontal_norm() > 0.0 {
            self.heading = turn_toward(self.heading, los.y.atan2(los.x), max_turn);
        }
        let desired_pitch = los.z.atan2(los.horizontal_norm());
        self.pitch += (desired_pitch - self.pitch).clamp(-max_turn, max_turn);
        let start = self.position;
        let mut end = start + self.velocity() * dt;
        end.z = end.z.max(0.0);
        self.position = end;
        self.flown_steps += 1;
        let miss_distance_m = closest_approach(start, end, target_before, target_after);
        if miss_distance_m < self.params.hit_radius_m {
            FlightStatus::Hit { miss_distance_m }
        } else if self.flown_steps as f64 * dt >= self.params.max_flight_s - 1e-9 {
            FlightStatus::Timeout
        } else {
            FlightStatus::InFlight
        }
    }
}
