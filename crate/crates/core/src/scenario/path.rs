//! Dotted parameter paths: `agents.<id>(.components.<id>)*.params.<key>(.<key>)*`.

use std::fmt;

use serde_json::Value;

use super::{AgentSpec, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed parameter path `{path}`: {reason}")]
pub struct PathError {
    pub path: String,
    pub reason: &'static str,
}

/// A parsed dotted path. `agents` is the carrier chain from the top-level
/// agent down to the addressed agent; `keys` walks its params tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamPath {
    pub agents: Vec<String>,
    pub keys: Vec<String>,
}

impl ParamPath {
    pub fn parse(path: &str) -> Result<Self, PathError> {
        let err = |reason| PathError { path: path.to_owned(), reason };
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(err("empty segment"));
        }
        let mut it = parts.into_iter().peekable();
        if it.next() != Some("agents") {
            return Err(err("must start with `agents`"));
        }
        let mut agents = vec![it.next().ok_or_else(|| err("missing agent id"))?.to_owned()];
        loop {
            match it.next() {
                Some("components") => agents.push(it.next().ok_or_else(|| err("missing component id"))?.to_owned()),
                Some("params") => break,
                Some(_) => return Err(err("expected `components` or `params`")),
                None => return Err(err("missing `params` segment")),
            }
        }
        let keys: Vec<String> = it.map(str::to_owned).collect();
        if keys.is_empty() {
            return Err(err("missing parameter key"));
        }
        Ok(Self { agents, keys })
    }

    /// The agent the path addresses.
    pub fn agent_id(&self) -> &str {
        self.agents.last().expect("parsed paths name at least one agent")
    }

    fn find_agent<'a>(&self, spec: &'a ScenarioSpec) -> Option<&'a AgentSpec> {
        let mut level = &spec.agents;
        let mut found = None;
        for id in &self.agents {
            let agent = level.iter().find(|a| &a.agent_id == id)?;
            level = &agent.components;
            found = Some(agent);
        }
        found
    }

    fn find_agent_mut<'a>(&self, spec: &'a mut ScenarioSpec) -> Option<&'a mut AgentSpec> {
        let mut level = &mut spec.agents;
        let (last, chain) = self.agents.split_last()?;
        for id in chain {
            let agent = level.iter_mut().find(|a| &a.agent_id == id)?;
            level = &mut agent.components;
        }
        level.iter_mut().find(|a| &a.agent_id == last)
    }

    /// The params value addressed by the path, if it exists.
    pub fn get<'a>(&self, spec: &'a ScenarioSpec) -> Option<&'a Value> {
        let agent = self.find_agent(spec)?;
        let (first, rest) = self.keys.split_first()?;
        let mut v = agent.params.get(first)?;
        for k in rest {
            v = v.as_object()?.get(k)?;
        }
        Some(v)
    }

    pub fn get_mut<'a>(&self, spec: &'a mut ScenarioSpec) -> Option<&'a mut Value> {
        let agent = self.find_agent_mut(spec)?;
        let (first, rest) = self.keys.split_first()?;
        let mut v = agent.params.get_mut(first)?;
        for k in rest {
            v = v.as_object_mut()?.get_mut(k)?;
        }
        Some(v)
    }
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agents.{}", self.agents[0])?;
        for c in &self.agents[1..] {
            write!(f, ".components.{c}")?;
        }
        write!(f, ".params.{}", self.keys.join("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_component_paths() {
        let p = ParamPath::parse("agents.blue1.components.radar.params.beam.width").unwrap();
        assert_eq!(p.agents, ["blue1", "radar"]);
        assert_eq!(p.keys, ["beam", "width"]);
        assert_eq!(p.agent_id(), "radar");
        assert_eq!(p.to_string(), "agents.blue1.components.radar.params.beam.width");
    }

    #[test]
    fn rejects_malformed_paths() {
        for bad in [
            "",
            "agents",
            "agents.blue1",
            "agents.blue1.params",
            "agent.blue1.params.x",
            "agents.blue1.foo.x",
            "agents..params.x",
            "agents.blue1.components.params.x.y",
        ] {
            assert!(ParamPath::parse(bad).is_err(), "{bad}");
        }
    }
}
