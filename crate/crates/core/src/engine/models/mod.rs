//! Built-in reference models.

mod platform;
mod sensor;
mod weapon;

use serde_json::{Map, Value};

pub use platform::{check_params as platform_check, manifest as platform_manifest, WaypointPlatform};
pub use sensor::{manifest as sensor_manifest, RangeSensor, DETECTIONS};
pub use weapon::{check_params as weapon_check, manifest as weapon_manifest, WezWeapon};

use super::behavior::ModelError;
use super::kinematics::Vec3;

pub const VERSION: &str = "1.0";

pub(crate) fn number(params: &Map<String, Value>, key: &str) -> Result<f64, ModelError> {
    params.get(key).and_then(Value::as_f64).ok_or_else(|| ModelError::new(format!("param `{key}` must be a number")))
}

pub(crate) fn point(v: &Value) -> Option<Vec3> {
    match v.as_array()?.as_slice() {
        [x, y, z] => Some(Vec3::new(x.as_f64()?, y.as_f64()?, z.as_f64()?)),
        _ => None,
    }
}

pub(crate) fn points(v: &Value) -> Option<Vec<Vec3>> {
    v.as_array()?.iter().map(point).collect()
}

/// Parses the first key of a set-param path as a number-valued param.
pub(crate) fn numeric_update<'k>(keys: &'k [String], value: &Value) -> Result<(&'k str, f64), String> {
    let [key] = keys else {
        return Err(format!("no nested parameter `{}`", keys.join(".")));
    };
    let x = value.as_f64().ok_or_else(|| format!("`{key}` must be a number"))?;
    if !x.is_finite() {
        return Err(format!("`{key}` must be finite"));
    }
    Ok((key.as_str(), x))
}
