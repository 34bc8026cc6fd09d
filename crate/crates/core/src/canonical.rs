//! Canonical JSON: object keys sorted lexicographically, no insignificant whitespace.
//!
//! `serde_json::Value` objects are backed by a `BTreeMap` (the `preserve_order`
//! feature is not enabled anywhere in the workspace), so routing a value through
//! `Value` before printing is enough to sort every nested key.

use serde::Serialize;

pub fn to_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("value is representable as JSON")
}

/// Canonical JSON bytes of `value`.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    serde_json::to_vec(&to_value(value)).expect("JSON value always serializes")
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_vec(value)).expect("serde_json emits UTF-8")
}

/// Canonical JSON, indented for files meant to be read by people.
pub fn to_string_pretty<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(&to_value(value)).expect("JSON value always serializes")
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
