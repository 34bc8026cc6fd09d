//! Placeholder templates, binding resolution and batch expansion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ParamPath, ScenarioSpec};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaceholderKind {
    Number,
    Text,
}

impl PlaceholderKind {
    fn admits(self, v: &Value) -> bool {
        match self {
            PlaceholderKind::Number => v.is_number(),
            PlaceholderKind::Text => v.is_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placeholder {
    pub name: String,
    pub path: String,
    pub kind: PlaceholderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTemplate {
    pub base: ScenarioSpec,
    #[serde(default)]
    pub placeholders: Vec<Placeholder>,
}

/// Placeholder name → bound value.
pub type BindingSet = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchOrigin {
    pub batch_id: String,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionRequest {
    pub request_id: String,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub origin: BatchOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateError {
    #[error("duplicate placeholder `{name}`")]
    DuplicatePlaceholder { name: String },
    #[error("placeholder `{name}`: {reason}")]
    BadPath { name: String, reason: String },
    #[error("placeholder `{name}` path `{path}` does not resolve to a params leaf")]
    UnresolvedPath { name: String, path: String },
    #[error("placeholder `{name}` is a {expected:?} but the base value at its path is not")]
    KindMismatch { name: String, expected: PlaceholderKind },
    #[error("placeholder `{name}`: bounds must satisfy lo < hi and apply to numbers only")]
    BadBounds { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolveError {
    #[error("no value bound for placeholder `{name}`")]
    MissingBinding { name: String },
    #[error("binding `{name}` names no declared placeholder")]
    UnknownBinding { name: String },
    #[error("binding `{name}` has the wrong kind")]
    KindMismatch { name: String },
    #[error("binding `{name}` = {value} outside [{lo}, {hi}]")]
    OutOfBounds { name: String, value: f64, lo: f64, hi: f64 },
    #[error("placeholder path `{path}` no longer resolves in the base scenario")]
    PathVanished { path: String },
}

/// A resolve failure annotated with the binding index that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("binding {index}: {error}")]
pub struct IndexedError {
    pub index: usize,
    pub error: ResolveError,
}

impl ScenarioTemplate {
    pub fn check(&self) -> Result<(), Vec<TemplateError>> {
        let mut errors = Vec::new();
        let mut names = BTreeSet::new();
        for p in &self.placeholders {
            if !names.insert(p.name.as_str()) {
                errors.push(TemplateError::DuplicatePlaceholder { name: p.name.clone() });
            }
            match ParamPath::parse(&p.path) {
                Err(e) => errors.push(TemplateError::BadPath { name: p.name.clone(), reason: e.reason.into() }),
                Ok(path) => match path.get(&self.base) {
                    None | Some(Value::Object(_)) => {
                        errors.push(TemplateError::UnresolvedPath { name: p.name.clone(), path: p.path.clone() })
                    }
                    Some(v) if !p.kind.admits(v) => {
                        errors.push(TemplateError::KindMismatch { name: p.name.clone(), expected: p.kind })
                    }
                    Some(_) => {}
                },
            }
            if let Some([lo, hi]) = p.bounds {
                if p.kind != PlaceholderKind::Number || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                    errors.push(TemplateError::BadBounds { name: p.name.clone() });
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Replaces each placeholder's leaf in the base scenario with its bound value.
pub fn resolve(template: &ScenarioTemplate, binding: &BindingSet) -> Result<ScenarioSpec, ResolveError> {
    for name in binding.keys() {
        if !template.placeholders.iter().any(|p| &p.name == name) {
            return Err(ResolveError::UnknownBinding { name: name.clone() });
        }
    }
    let mut out = template.base.clone();
    for p in &template.placeholders {
        let value = binding.get(&p.name).ok_or_else(|| ResolveError::MissingBinding { name: p.name.clone() })?;
        if !p.kind.admits(value) {
            return Err(ResolveError::KindMismatch { name: p.name.clone() });
        }
        if let (Some([lo, hi]), Some(x)) = (p.bounds, value.as_f64()) {
            if !(lo..=hi).contains(&x) {
                return Err(ResolveError::OutOfBounds { name: p.name.clone(), value: x, lo, hi });
            }
        }
        let vanished = || ResolveError::PathVanished { path: p.path.clone() };
        let path = ParamPath::parse(&p.path).map_err(|_| vanished())?;
        let leaf = path.get_mut(&mut out).ok_or_else(vanished)?;
        if leaf.is_object() {
            return Err(vanished());
        }
        *leaf = value.clone();
    }
    Ok(out)
}

/// Resolves every binding and attaches per-run seeds.
///
/// Request `i` has id `<batch_id>-<i>` (zero-padded to 5 digits) and seed
/// `derive_seed(batch_seed, i)`. Every failing binding is reported.
pub fn expand_batch(
    template: &ScenarioTemplate,
    bindings: &[BindingSet],
    batch_seed: u64,
    batch_id: &str,
) -> Result<Vec<ExecutionRequest>, Vec<IndexedError>> {
    let mut requests = Vec::with_capacity(bindings.len());
    let mut errors = Vec::new();
    for (index, binding) in bindings.iter().enumerate() {
        match resolve(template, binding) {
            Ok(scenario) => requests.push(ExecutionRequest {
                request_id: format!("{batch_id}-{index:05}"),
                scenario,
                seed: derive_seed(batch_seed, index as u64),
                origin: BatchOrigin { batch_id: batch_id.to_owned(), index: index as u64 },
            }),
            Err(error) => errors.push(IndexedError { index, error }),
        }
    }
    if errors.is_empty() {
        Ok(requests)
    } else {
        Err(errors)
    }
}
