//! Design-of-experiments generators producing binding lists.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BindingSet;
use crate::rng::SplitMix64;

/// One factor of a full-factorial design; order of factors is significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factor {
    pub name: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// A design request as it appears in batch submissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DoeSpec {
    FullFactorial(Vec<Factor>),
    LatinHypercube { n: usize, ranges: Vec<FactorRange>, seed: u64 },
}

impl DoeSpec {
    pub fn generate(&self) -> Result<Vec<BindingSet>, DoeError> {
        match self {
            DoeSpec::FullFactorial(factors) => full_factorial(factors),
            DoeSpec::LatinHypercube { n, ranges, seed } => latin_hypercube(*n, ranges, *seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DoeError {
    #[error("factor `{name}` has no values")]
    EmptyFactor { name: String },
    #[error("factor `{name}` appears twice")]
    DuplicateFactor { name: String },
    #[error("range of `{name}` must satisfy lo < hi with finite bounds")]
    BadRange { name: String },
    #[error("a latin hypercube needs at least one sample")]
    NoSamples,
}

fn unique_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<(), DoeError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(DoeError::DuplicateFactor { name: n.to_owned() });
        }
    }
    Ok(())
}

/// Cartesian product in row-major order: the last factor varies fastest.
pub fn full_factorial(factors: &[Factor]) -> Result<Vec<BindingSet>, DoeError> {
    unique_names(factors.iter().map(|f| f.name.as_str()))?;
    if let Some(f) = factors.iter().find(|f| f.values.is_empty()) {
        return Err(DoeError::EmptyFactor { name: f.name.clone() });
    }
    let total: usize = factors.iter().map(|f| f.values.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut counters = vec![0usize; factors.len()];
    for _ in 0..total {
        out.push(factors.iter().zip(&counters).map(|(f, &i)| (f.name.clone(), f.values[i].clone())).collect());
        for (c, f) in counters.iter_mut().zip(factors).rev() {
            *c += 1;
            if *c < f.values.len() {
                break;
            }
            *c = 0;
        }
    }
    Ok(out)
}

/// Latin hypercube sample of `n` points.
///
/// Per dimension, in the given order: one uniform draw inside each of the `n`
/// equal strata (stratum order), then a Fisher-Yates shuffle of the stratum
/// values. All draws come from one SplitMix64 stream seeded with `seed`.
pub fn latin_hypercube(n: usize, ranges: &[FactorRange], seed: u64) -> Result<Vec<BindingSet>, DoeError> {
    if n == 0 {
        return Err(DoeError::NoSamples);
    }
    unique_names(ranges.iter().map(|r| r.name.as_str()))?;
    if let Some(r) = ranges.iter().find(|r| !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi)) {
        return Err(DoeError::BadRange { name: r.name.clone() });
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = vec![BindingSet::new(); n];
    for r in ranges {
        let width = (r.hi - r.lo) / n as f64;
        let mut column: Vec<f64> = (0..n)
            .map(|k| {
                let lo = r.lo + k as f64 * width;
                let hi = if k + 1 == n { r.hi } else { r.lo + (k + 1) as f64 * width };
                let v = lo + rng.next_f64() * (hi - lo);
                // rounding can land exactly on the upper edge
                if v < hi {
                    v
                } else {
                    lo
                }
            })
            .collect();
        for i in (1..n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            column.swap(i, j);
        }
        for (row, v) in out.iter_mut().zip(column) {
            row.insert(r.name.clone(), Value::from(v));
        }
    }
    Ok(out)
}
