//! Out-of-process extension models.
//!
//! An extension is an executable plus a `*.manifest.json`. The host starts one
//! process per agent instance and exchanges newline-delimited JSON over the
//! child's stdin/stdout: one request line, one reply line. Extension authors
//! implement [`ModelBehavior`] and call [`serve_stdio`] from `main`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::behavior::{Emitter, ModelBehavior, ModelError, PerceptionView, StepInput};
use super::manifest::ModelManifest;
use super::registry::ModelFactory;
use super::AgentState;
use crate::rng::SplitMix64;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello,
    Init { params: Map<String, Value>, seed: u64, state: AgentState },
    Step { step: u64, dt: f64, sim_time: f64, view: PerceptionView, state: AgentState, emitter: Emitter },
    SetParam { keys: Vec<String>, value: Value, state: AgentState },
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<AgentState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emitter: Option<Emitter>,
}

impl Reply {
    fn failed(error: impl Into<String>) -> Self {
        Reply { ok: false, error: Some(error.into()), ..Default::default() }
    }
}

struct Session {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl Session {
    fn start(artifact: &Path) -> Result<Self, String> {
        let mut child = Command::new(artifact)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn failed: {e}"))?;
        let stdin = BufWriter::new(child.stdin.take().ok_or("no stdin")?);
        let stdout = BufReader::new(child.stdout.take().ok_or("no stdout")?);
        Ok(Session { child, stdin, stdout })
    }

    fn call(&mut self, req: &Request) -> Result<Reply, String> {
        serde_json::to_writer(&mut self.stdin, req).map_err(|e| e.to_string())?;
        self.stdin.write_all(b"\n").and_then(|_| self.stdin.flush()).map_err(|e| format!("write: {e}"))?;
        let mut line = String::new();
        let n = self.stdout.read_line(&mut line).map_err(|e| format!("read: {e}"))?;
        if n == 0 {
            return Err("extension closed its output".into());
        }
        let reply: Reply = serde_json::from_str(&line).map_err(|e| format!("bad reply: {e}"))?;
        if reply.ok {
            Ok(reply)
        } else {
            Err(reply.error.unwrap_or_else(|| "unspecified extension error".into()))
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts the artifact and checks that it identifies as the manifest's model.
pub(crate) fn probe(artifact: &Path, manifest: &ModelManifest) -> Result<(), String> {
    let mut s = Session::start(artifact)?;
    let reply = s.call(&Request::Hello)?;
    match (reply.name.as_deref(), reply.version.as_deref()) {
        (Some(n), Some(v)) if n == manifest.name && v == manifest.version => Ok(()),
        (n, v) => Err(format!(
            "artifact identifies as {}/{}, manifest declares {}",
            n.unwrap_or("?"),
            v.unwrap_or("?"),
            manifest.model_ref()
        )),
    }
}

pub(crate) struct ExtensionFactory {
    artifact: PathBuf,
}

impl ExtensionFactory {
    pub(crate) fn new(artifact: PathBuf) -> Self {
        Self { artifact }
    }
}

impl ModelFactory for ExtensionFactory {
    fn create(&self) -> Result<Box<dyn ModelBehavior>, ModelError> {
        let session = Session::start(&self.artifact).map_err(ModelError)?;
        Ok(Box::new(ExtensionBehavior { session }))
    }
}

/// Host-side proxy forwarding the behaviour contract to a child process.
struct ExtensionBehavior {
    session: Session,
}

fn adopt(state: &mut AgentState, returned: Option<AgentState>) -> Result<(), ModelError> {
    let returned = returned.ok_or_else(|| ModelError::new("extension reply carries no state"))?;
    if returned.agent_id != state.agent_id || returned.side != state.side || returned.model != state.model {
        return Err(ModelError::new("extension changed the identity of its agent"));
    }
    if returned.parent != state.parent {
        return Err(ModelError::new("extension changed its carrier"));
    }
    *state = returned;
    Ok(())
}

impl ModelBehavior for ExtensionBehavior {
    fn init(&mut self, params: &Map<String, Value>, rng: SplitMix64, state: &mut AgentState) -> Result<(), ModelError> {
        let reply = self
            .session
            .call(&Request::Init { params: params.clone(), seed: rng.state(), state: state.clone() })
            .map_err(ModelError)?;
        adopt(state, reply.state)
    }

    fn step(&mut self, input: &StepInput<'_>, state: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError> {
        let reply = self
            .session
            .call(&Request::Step {
                step: input.step,
                dt: input.dt,
                sim_time: input.sim_time,
                view: input.view.clone(),
                state: state.clone(),
                emitter: out.clone(),
            })
            .map_err(ModelError)?;
        adopt(state, reply.state)?;
        *out = reply.emitter.ok_or_else(|| ModelError::new("extension reply carries no emitter"))?;
        Ok(())
    }

    fn on_set_param(&mut self, keys: &[String], value: &Value, state: &mut AgentState) -> Result<(), String> {
        let reply = self.session.call(&Request::SetParam {
            keys: keys.to_vec(),
            value: value.clone(),
            state: state.clone(),
        })?;
        adopt(state, reply.state).map_err(|e| e.0)
    }
}

/// Serves one agent instance over the given streams until input ends.
pub fn serve<R: BufRead, W: Write>(
    name: &str,
    version: &str,
    mut make: impl FnMut() -> Box<dyn ModelBehavior>,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    let mut behavior: Option<Box<dyn ModelBehavior>> = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Err(e) => Reply::failed(format!("bad request: {e}")),
            Ok(Request::Hello) => {
                Reply { ok: true, name: Some(name.to_owned()), version: Some(version.to_owned()), ..Default::default() }
            }
            Ok(Request::Init { params, seed, mut state }) => {
                let b = behavior.insert(make());
                match b.init(&params, SplitMix64::new(seed), &mut state) {
                    Ok(()) => Reply { ok: true, state: Some(state), ..Default::default() },
                    Err(e) => Reply::failed(e.0),
                }
            }
            Ok(Request::Step { step, dt, sim_time, view, mut state, mut emitter }) => match behavior.as_mut() {
                None => Reply::failed("step before init"),
                Some(b) => match b.step(&StepInput { step, dt, sim_time, view: &view }, &mut state, &mut emitter) {
                    Ok(()) => Reply { ok: true, state: Some(state), emitter: Some(emitter), ..Default::default() },
                    Err(e) => Reply::failed(e.0),
                },
            },
            Ok(Request::SetParam { keys, value, mut state }) => match behavior.as_mut() {
                None => Reply::failed("set_param before init"),
                Some(b) => match b.on_set_param(&keys, &value, &mut state) {
                    Ok(()) => Reply { ok: true, state: Some(state), ..Default::default() },
                    Err(e) => Reply::failed(e),
                },
            },
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// `serve` over the process's stdin and stdout.
pub fn serve_stdio(name: &str, version: &str, make: impl FnMut() -> Box<dyn ModelBehavior>) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    serve(name, version, make, stdin.lock(), std::io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::models::WaypointPlatform;
    use crate::scenario::Side;
    use serde_json::json;

    fn exchange(requests: &[Request]) -> Vec<Reply> {
        let mut input = String::new();
        for r in requests {
            input.push_str(&serde_json::to_string(r).unwrap());
            input.push('\n');
        }
        let mut out = Vec::new();
        serve("p", "1", || Box::<WaypointPlatform>::default(), input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn serve_round_trip_drives_a_behaviour() {
        let state = AgentState::new("a", Side::Blue, "p/1");
        let params = json!({
            "position": [0, 0, 0], "heading_rad": 0, "speed_mps": 10, "max_turn_rate_rad_s": 0.1,
            "waypoints": [], "capture_radius_m": 100, "climb_rate_mps": 50
        });
        let replies = exchange(&[
            Request::Hello,
            Request::Init { params: params.as_object().unwrap().clone(), seed: 1, state: state.clone() },
            Request::Step {
                step: 1,
                dt: 1.0,
                sim_time: 1.0,
                view: PerceptionView::default(),
                state: state.clone(),
                emitter: Emitter::new("a", 0),
            },
        ]);
        assert_eq!(replies[0].name.as_deref(), Some("p"));
        assert!(replies[1].ok);
        assert!(replies[2].ok);
        // step started from the caller-supplied state, not the init result
        assert_eq!(replies[2].state.as_ref().unwrap().position.x, 0.0);
    }

    #[test]
    fn serve_reports_errors_in_band() {
        let state = AgentState::new("a", Side::Blue, "p/1");
        let replies = exchange(&[
            Request::Step {
                step: 1,
                dt: 1.0,
                sim_time: 1.0,
                view: PerceptionView::default(),
                state: state.clone(),
                emitter: Emitter::new("a", 0),
            },
            Request::Init { params: Map::new(), seed: 0, state },
        ]);
        assert!(!replies[0].ok);
        assert!(!replies[1].ok);
        assert!(replies[1].error.as_deref().unwrap().contains("position"));
    }
}
