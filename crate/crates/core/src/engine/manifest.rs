//! Model manifests: the JSON contract describing what a model accepts and emits.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Number,
    Text,
    Boolean,
    List,
    Object,
}

impl ParamType {
    pub fn admits(self, v: &Value) -> bool {
        match self {
            ParamType::Number => v.is_number(),
            ParamType::Text => v.is_string(),
            ParamType::Boolean => v.is_boolean(),
            ParamType::List => v.is_array(),
            ParamType::Object => v.is_object(),
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamType::Number => "number",
            ParamType::Text => "text",
            ParamType::Boolean => "boolean",
            ParamType::List => "list",
            ParamType::Object => "object",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    pub key: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default)]
    pub required: bool,
    /// Inclusive `[lo, hi]`, numbers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagDecl {
    pub tag: String,
    pub payload: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamDecl>,
    #[serde(default)]
    pub accepted_components: Vec<String>,
    #[serde(default)]
    pub emitted_tags: Vec<TagDecl>,
    /// Extension executable, relative to the manifest file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
}

impl ModelManifest {
    pub fn param(&self, key: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.key == key)
    }

    pub fn tag(&self, tag: &str) -> Option<&TagDecl> {
        self.emitted_tags.iter().find(|t| t.tag == tag)
    }

    pub fn model_ref(&self) -> String {
        format!("{}/{}", self.name, self.version)
    }

    /// Checks the manifest's own invariants; returns every problem found.
    pub fn check(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.name.is_empty() || self.name.contains('/') {
            problems.push(format!("invalid model name `{}`", self.name));
        }
        if self.version.is_empty() {
            problems.push("empty version".to_owned());
        }
        let mut keys = std::collections::BTreeSet::new();
        for p in &self.params {
            if !keys.insert(p.key.as_str()) {
                problems.push(format!("duplicate param `{}`", p.key));
            }
            if p.required && p.default.is_some() {
                problems.push(format!("required param `{}` declares a default", p.key));
            }
            if let Some(d) = &p.default {
                if !p.ty.admits(d) {
                    problems.push(format!("default of `{}` is not a {}", p.key, p.ty));
                }
            }
            if let Some([lo, hi]) = p.bounds {
                if p.ty != ParamType::Number {
                    problems.push(format!("bounds on non-number param `{}`", p.key));
                } else if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
                    problems.push(format!("bounds of `{}` are not ordered", p.key));
                } else if let Some(d) = p.default.as_ref().and_then(Value::as_f64) {
                    if d < lo || d > hi {
                        problems.push(format!("default of `{}` lies outside its bounds", p.key));
                    }
                }
            }
        }
        let mut tags = std::collections::BTreeSet::new();
        for t in &self.emitted_tags {
            if !tags.insert(t.tag.as_str()) {
                problems.push(format!("duplicate tag `{}`", t.tag));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}
