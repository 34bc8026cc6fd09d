use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::behavior::{Emitter, ModelBehavior, PerceptionView, Spawn, StepInput};
use super::kinematics::{Flight, FlightStatus, MISSILE_MODEL};
use super::manifest::ModelManifest;
use super::record::{tags, Payload, Scalar, StepRecord};
use super::registry::ModelRegistry;
use super::{AgentState, SimClock};
use crate::rng::{agent_seed, SplitMix64};
use crate::scenario::{self, ParamPath, ScenarioSpec, ValidationError};

static INVOCATIONS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static LOCAL_INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

fn count_invocation() {
    INVOCATIONS.fetch_add(1, Ordering::Relaxed);
    LOCAL_INVOCATIONS.with(|c| c.set(c.get() + 1));
}

/// Simulations constructed plus steps executed, process-wide.
pub fn engine_invocations() -> u64 {
    INVOCATIONS.load(Ordering::Relaxed)
}

/// Simulations constructed plus steps executed on the calling thread.
pub fn engine_invocations_on_this_thread() -> u64 {
    LOCAL_INVOCATIONS.with(Cell::get)
}

/// A parameter change requested while a run is in flight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetParam {
    pub agent_id: String,
    pub param_path: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("scenario is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
    #[error("agent `{agent_id}` failed at step {step}: {reason}")]
    ModelFailed { agent_id: String, step: u64, reason: String },
    #[error("run already finished")]
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "UPPERCASE")]
pub enum RunOutcome {
    Completed { steps: u64 },
    Stopped { step: u64 },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("record sink failed: {0}")]
pub struct SinkError(pub String);

/// Consumer of each step's records, called once per step in order.
pub trait RecordSink {
    fn accept(&mut self, step: u64, records: Vec<StepRecord>) -> Result<(), SinkError>;
}

/// Collects every record in memory.
#[derive(Debug, Default, Clone)]
pub struct VecSink(pub Vec<StepRecord>);

impl RecordSink for VecSink {
    fn accept(&mut self, _step: u64, records: Vec<StepRecord>) -> Result<(), SinkError> {
        self.0.extend(records);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Directive {
    pub stop: bool,
    pub set_params: Vec<SetParam>,
}

/// Polled at every step boundary. Implementations may block here (pause,
/// pacing); the engine never observes wall time.
pub trait ControlSource {
    fn at_boundary(&mut self, clock: &SimClock) -> Directive;
}

/// Runs to completion with no external control.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoControl;

impl ControlSource for NoControl {
    fn at_boundary(&mut self, _clock: &SimClock) -> Directive {
        Directive::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub records: Vec<StepRecord>,
    pub terminated: bool,
}

struct MissileFlight {
    flight: Flight,
    target_id: String,
}

struct Slot {
    state: AgentState,
    behavior: Option<Box<dyn ModelBehavior>>,
    manifest: Option<ModelManifest>,
    /// Top-level carrier whose kinematics a component follows.
    root: Option<String>,
    spawned: u64,
    missile: Option<MissileFlight>,
}

/// One run of a scenario.
pub struct Simulation {
    run_id: String,
    clock: SimClock,
    max_steps: u64,
    slots: BTreeMap<String, Slot>,
    pending: Vec<SetParam>,
    initial: Vec<StepRecord>,
    terminated: bool,
}

impl Simulation {
    /// Validates the scenario, builds and initialises every agent in ascending
    /// id order, and prepares the step-0 status records.
    pub fn new(spec: &ScenarioSpec, registry: &ModelRegistry, run_id: &str, seed: u64) -> Result<Self, EngineError> {
        count_invocation();
        scenario::validate(spec, registry).map_err(EngineError::Invalid)?;
        let walk = spec.walk();
        let parents: BTreeMap<&str, Option<&str>> = walk.iter().map(|(a, p, _)| (a.agent_id.as_str(), *p)).collect();
        fn root_of<'a>(parents: &BTreeMap<&'a str, Option<&'a str>>, mut id: &'a str) -> String {
            while let Some(Some(p)) = parents.get(id) {
                id = p;
            }
            id.to_owned()
        }
        let mut slots = BTreeMap::new();
        let mut specs: Vec<_> = walk.iter().collect();
        specs.sort_by(|a, b| a.0.agent_id.cmp(&b.0.agent_id));
        for (agent, parent, _) in specs {
            let id = agent.agent_id.as_str();
            let fail = |reason: String| EngineError::ModelFailed { agent_id: id.to_owned(), step: 0, reason };
            let model = registry.get(&agent.model).expect("validated above");
            let mut behavior = model.instantiate().map_err(|e| fail(e.0))?;
            let mut state = AgentState::new(id, agent.side, agent.model.to_string());
            state.parent = parent.map(str::to_owned);
            let params = model.effective_params(&agent.params);
            behavior.init(&params, SplitMix64::new(agent_seed(seed, id)), &mut state).map_err(|e| fail(e.0))?;
            let root = parent.map(|_| root_of(&parents, id));
            slots.insert(
                id.to_owned(),
                Slot {
                    state,
                    behavior: Some(behavior),
                    manifest: Some(model.manifest.clone()),
                    root,
                    spawned: 0,
                    missile: None,
                },
            );
        }
        let mut sim = Simulation {
            run_id: run_id.to_owned(),
            clock: SimClock::new(spec.sim.step_dt),
            max_steps: spec.sim.max_steps,
            slots,
            pending: Vec::new(),
            initial: Vec::new(),
            terminated: false,
        };
        sim.sync_components();
        let mut initial = Vec::new();
        sim.push_status(&mut initial);
        sim.initial = initial;
        Ok(sim)
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn max_steps(&self) -> u64 {
        self.max_steps
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn is_finished(&self) -> bool {
        self.terminated || self.clock.step >= self.max_steps
    }

    pub fn agent(&self, agent_id: &str) -> Option<&AgentState> {
        self.slots.get(agent_id).map(|s| &s.state)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentState> {
        self.slots.values().map(|s| &s.state)
    }

    /// The step-0 records (status of every agent after initialisation).
    pub fn take_initial_records(&mut self) -> Vec<StepRecord> {
        std::mem::take(&mut self.initial)
    }

    /// Queues a parameter change for the next step boundary.
    pub fn set_param(&mut self, change: SetParam) {
        self.pending.push(change);
    }

    fn record(&self, step: u64, agent_id: &str, tag: &str, payload: Payload) -> StepRecord {
        StepRecord {
            run_id: self.run_id.clone(),
            step,
            sim_time: self.clock.time_of(step),
            tag: tag.to_owned(),
            agent_id: agent_id.to_owned(),
            payload,
        }
    }

    fn push_status(&self, out: &mut Vec<StepRecord>) {
        let step = self.clock.step;
        for (id, slot) in &self.slots {
            let s = &slot.state;
            let payload: Payload = [
                ("x", Scalar::Number(s.position.x)),
                ("y", Scalar::Number(s.position.y)),
                ("z", Scalar::Number(s.position.z)),
                ("speed_mps", Scalar::Number(s.speed)),
                ("heading_rad", Scalar::Number(s.heading)),
                ("alive", Scalar::Bool(s.alive)),
                ("side", Scalar::from(s.side.as_str())),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
            out.push(self.record(step, id, tags::STATUS, payload));
        }
    }

    fn sync_components(&mut self) {
        let roots: Vec<(String, String)> =
            self.slots.iter().filter_map(|(id, s)| Some((id.clone(), s.root.clone()?))).collect();
        for (id, root) in roots {
            let Some(carrier) = self.slots.get(&root).map(|s| s.state.clone()) else { continue };
            let c = &mut self.slots.get_mut(&id).expect("listed above").state;
            c.position = carrier.position;
            c.heading = carrier.heading;
            c.speed = carrier.speed;
            if !carrier.alive {
                c.alive = false;
            }
        }
    }

    fn carrier_chain(&self, agent_id: &str) -> Vec<String> {
        let mut chain = vec![agent_id.to_owned()];
        let mut cur = agent_id;
        while let Some(p) = self.slots.get(cur).and_then(|s| s.state.parent.as_deref()) {
            chain.push(p.to_owned());
            cur = p;
        }
        chain.reverse();
        chain
    }

    fn apply_pending(&mut self, step: u64, records: &mut Vec<StepRecord>) {
        let mut rejected: BTreeMap<String, Payload> = BTreeMap::new();
        for change in std::mem::take(&mut self.pending) {
            let outcome = ParamPath::parse(&change.param_path).map_err(|e| e.to_string()).and_then(|path| {
                if path.agent_id() != change.agent_id || path.agents != self.carrier_chain(&change.agent_id) {
                    return Err(format!("path does not address agent `{}`", change.agent_id));
                }
                let slot = self.slots.get_mut(&change.agent_id).ok_or("unknown agent")?;
                if !slot.state.alive {
                    return Err("agent is not alive".into());
                }
                let behavior = slot.behavior.as_mut().ok_or("agent accepts no parameters")?;
                behavior.on_set_param(&path.keys, &change.value, &mut slot.state)
            });
            if let Err(reason) = outcome {
                if !self.slots.contains_key(&change.agent_id) {
                    tracing::warn!(agent = %change.agent_id, %reason, "set_param for unknown agent dropped");
                    continue;
                }
                rejected.entry(change.agent_id.clone()).or_insert_with(|| {
                    [
                        ("path".to_owned(), Scalar::Text(change.param_path.clone())),
                        ("reason".to_owned(), Scalar::Text(reason)),
                    ]
                    .into()
                });
            }
        }
        for (agent_id, payload) in rejected {
            records.push(self.record(step, &agent_id, tags::PARAM_REJECTED, payload));
        }
    }

    /// Advances the world by one step and returns that step's records, sorted
    /// by `(agent_id, tag)`.
    pub fn step(&mut self) -> Result<StepReport, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished);
        }
        count_invocation();
        let step = self.clock.step + 1;
        let dt = self.clock.step_dt;
        let mut records = Vec::new();
        self.apply_pending(step, &mut records);

        let snapshot: BTreeMap<String, AgentState> =
            self.slots.iter().map(|(id, s)| (id.clone(), s.state.clone())).collect();
        let view = PerceptionView::from_snapshot(snapshot.values());
        let input = StepInput { step, dt, sim_time: self.clock.time_of(step), view: &view };

        let mut spawns: Vec<(String, Spawn)> = Vec::new();
        let mut terminated = false;
        let mut emitted: Vec<(String, String, Payload)> = Vec::new();
        for (id, slot) in self.slots.iter_mut() {
            let Some(behavior) = slot.behavior.as_mut() else { continue };
            if !slot.state.alive {
                continue;
            }
            let fail = |reason: String| EngineError::ModelFailed { agent_id: id.clone(), step, reason };
            let mut out = Emitter::new(id, slot.spawned);
            behavior.step(&input, &mut slot.state, &mut out).map_err(|e| fail(e.0))?;
            if slot.state.agent_id != *id {
                return Err(fail("model changed its agent id".into()));
            }
            let (recs, sp, term) = out.into_parts();
            let manifest = slot.manifest.as_ref().expect("modelled agents carry a manifest");
            for (tag, payload) in recs {
                check_emission(manifest, &tag, &payload).map_err(fail)?;
                emitted.push((id.clone(), tag, payload));
            }
            slot.spawned += sp.len() as u64;
            spawns.extend(sp.into_iter().map(|s| (id.clone(), s)));
            terminated |= term;
        }
        for (id, tag, payload) in emitted {
            records.push(self.record(step, &id, &tag, payload));
        }

        self.fly_missiles(step, dt, &snapshot, &mut records);
        self.sync_components();
        self.spawn(spawns, step)?;

        self.clock.step = step;
        self.push_status(&mut records);
        records.sort_by(|a, b| (&a.agent_id, &a.tag).cmp(&(&b.agent_id, &b.tag)));
        if let Some(w) = records.windows(2).find(|w| w[0].agent_id == w[1].agent_id && w[0].tag == w[1].tag) {
            return Err(EngineError::ModelFailed {
                agent_id: w[0].agent_id.clone(),
                step,
                reason: format!("emitted tag `{}` twice in one step", w[0].tag),
            });
        }
        self.terminated |= terminated;
        Ok(StepReport { step, records, terminated })
    }

    fn fly_missiles(
        &mut self,
        step: u64,
        dt: f64,
        snapshot: &BTreeMap<String, AgentState>,
        records: &mut Vec<StepRecord>,
    ) {
        let missiles: Vec<String> =
            self.slots.iter().filter(|(_, s)| s.missile.is_some() && s.state.alive).map(|(id, _)| id.clone()).collect();
        for id in missiles {
            let target_id = self.slots[&id].missile.as_ref().expect("filtered").target_id.clone();
            let target_now = self.slots.get(&target_id).map(|t| (t.state.alive, t.state.position));
            let target_before = snapshot.get(&target_id).map(|t| t.position);
            let (status, payload) = match (target_now, target_before) {
                (Some((true, after)), Some(before)) => {
                    let slot = self.slots.get_mut(&id).expect("listed");
                    let m = slot.missile.as_mut().expect("filtered");
                    let status = m.flight.advance(before, after, dt);
                    slot.state.position = m.flight.position;
                    slot.state.heading = m.flight.heading;
                    (status, None)
                }
                _ => (FlightStatus::Timeout, Some("target_lost")),
            };
            let mut detail: Payload = [("target_id".to_owned(), Scalar::Text(target_id.clone()))].into();
            match status {
                FlightStatus::InFlight => continue,
                FlightStatus::Hit { miss_distance_m } => {
                    detail.insert("miss_distance_m".into(), Scalar::Number(miss_distance_m));
                    if let Some(t) = self.slots.get_mut(&target_id) {
                        t.state.alive = false;
                    }
                    records.push(self.record(step, &id, tags::HIT, detail));
                }
                FlightStatus::Timeout => {
                    detail.insert("reason".into(), Scalar::from(payload.unwrap_or("timeout")));
                    records.push(self.record(step, &id, tags::MISS, detail));
                }
            }
            let m = self.slots.get_mut(&id).expect("listed");
            m.state.alive = false;
            m.state.speed = 0.0;
        }
    }

    fn spawn(&mut self, spawns: Vec<(String, Spawn)>, step: u64) -> Result<(), EngineError> {
        for (spawner, Spawn::Missile { agent_id, target_id, missile }) in spawns {
            let fail = |reason: String| EngineError::ModelFailed { agent_id: spawner.clone(), step, reason };
            if !agent_id.starts_with(&format!("{spawner}.m")) || self.slots.contains_key(&agent_id) {
                return Err(fail(format!("invalid spawn id `{agent_id}`")));
            }
            let origin = self.slots[&spawner].state.clone();
            let target = self
                .slots
                .get(&target_id)
                .map(|t| t.state.position)
                .ok_or_else(|| fail(format!("launch at unknown target `{target_id}`")))?;
            let flight = Flight::launch(missile, origin.position, target);
            let mut state = AgentState::new(&agent_id, origin.side, format!("{MISSILE_MODEL}/builtin"));
            state.position = origin.position;
            state.heading = flight.heading;
            state.speed = missile.speed_mps;
            state.private.insert("target_id".into(), json!(target_id));
            state.private.insert("launcher".into(), json!(spawner));
            self.slots.insert(
                agent_id,
                Slot {
                    state,
                    behavior: None,
                    manifest: None,
                    root: None,
                    spawned: 0,
                    missile: Some(MissileFlight { flight, target_id }),
                },
            );
        }
        Ok(())
    }
}

fn check_emission(manifest: &ModelManifest, tag: &str, payload: &Payload) -> Result<(), String> {
    if tags::ENGINE.contains(&tag) {
        return Err(format!("tag `{tag}` is reserved for the engine"));
    }
    let decl = manifest.tag(tag).ok_or_else(|| format!("tag `{tag}` is not declared in the manifest"))?;
    match payload.keys().find(|k| !decl.payload.contains(k)) {
        Some(k) => Err(format!("payload key `{k}` is not declared for tag `{tag}`")),
        None => Ok(()),
    }
}

/// Executes a scenario from initialisation to a terminal outcome.
///
/// Control is consulted before every step; records go to `sink` one step at
/// a time, starting with the step-0 status records.
pub fn run_simulation(
    spec: &ScenarioSpec,
    registry: &ModelRegistry,
    run_id: &str,
    seed: u64,
    sink: &mut dyn RecordSink,
    control: &mut dyn ControlSource,
) -> RunOutcome {
    let mut sim = match Simulation::new(spec, registry, run_id, seed) {
        Ok(sim) => sim,
        Err(e) => return RunOutcome::Failed { reason: e.to_string() },
    };
    if let Err(e) = sink.accept(0, sim.take_initial_records()) {
        return RunOutcome::Failed { reason: e.to_string() };
    }
    loop {
        if sim.is_finished() {
            return RunOutcome::Completed { steps: sim.clock().step };
        }
        let directive = control.at_boundary(sim.clock());
        if directive.stop {
            return RunOutcome::Stopped { step: sim.clock().step };
        }
        for p in directive.set_params {
            sim.set_param(p);
        }
        let report = match sim.step() {
            Ok(r) => r,
            Err(e) => return RunOutcome::Failed { reason: e.to_string() },
        };
        if let Err(e) = sink.accept(report.step, report.records) {
            return RunOutcome::Failed { reason: e.to_string() };
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use serde_json::{json, Map};

    use super::*;
    use crate::engine::registry::ModelFactory;
    use crate::engine::ModelError;

    /// Emits whatever `script` says at each step.
    #[derive(Clone, Copy)]
    enum Script {
        Quiet,
        UndeclaredTag,
        UndeclaredKey,
        EngineTag,
        Terminate(u64),
        Fail(u64),
    }

    struct Scripted(Script);

    impl ModelBehavior for Scripted {
        fn init(&mut self, _: &Map<String, Value>, _: SplitMix64, _: &mut AgentState) -> Result<(), ModelError> {
            Ok(())
        }

        fn step(&mut self, input: &StepInput<'_>, _: &mut AgentState, out: &mut Emitter) -> Result<(), ModelError> {
            match self.0 {
                Script::Quiet => {}
                Script::UndeclaredTag => out.record("surprise", [("v", Scalar::Number(1.0))]),
                Script::UndeclaredKey => out.record("note", [("other", Scalar::Number(1.0))]),
                Script::EngineTag => out.record("hit", [("v", Scalar::Number(1.0))]),
                Script::Terminate(at) if input.step == at => out.request_termination(),
                Script::Fail(at) if input.step == at => return Err(ModelError::new("boom")),
                Script::Terminate(_) | Script::Fail(_) => {}
            }
            Ok(())
        }

        fn on_set_param(&mut self, _: &[String], _: &Value, _: &mut AgentState) -> Result<(), String> {
            Err("read-only".into())
        }
    }

    struct Factory(Script);

    impl ModelFactory for Factory {
        fn create(&self) -> Result<Box<dyn ModelBehavior>, ModelError> {
            Ok(Box::new(Scripted(self.0)))
        }
    }

    fn registry(script: Script) -> ModelRegistry {
        let mut reg = ModelRegistry::with_builtins();
        let manifest = serde_json::from_value(json!({
            "name": "scripted", "version": "1",
            "emitted_tags": [{"tag": "note", "payload": ["v"]}, {"tag": "hit", "payload": ["v"]}]
        }))
        .unwrap();
        reg.register(manifest, Arc::new(Factory(script))).unwrap();
        reg
    }

    fn spec(agents: Value, max_steps: u64) -> ScenarioSpec {
        serde_json::from_value(json!({"name": "t", "sim": {"step_dt": 0.1, "max_steps": max_steps}, "agents": agents}))
            .unwrap()
    }

    fn scripted(id: &str) -> Value {
        json!({"agent_id": id, "side": "BLUE", "model": {"name": "scripted", "version": "1"}})
    }

    fn platform(id: &str, side: &str, x: f64, speed: f64) -> Value {
        json!({"agent_id": id, "side": side, "model": {"name": "waypoint_platform", "version": "1.0"},
               "params": {"position": [x, 0.0, 0.0], "speed_mps": speed, "max_turn_rate_rad_s": 0.0}})
    }

    fn run(spec: &ScenarioSpec, reg: &ModelRegistry, control: &mut dyn ControlSource) -> (RunOutcome, Vec<StepRecord>) {
        let mut sink = VecSink::default();
        let outcome = run_simulation(spec, reg, "r", 1, &mut sink, control);
        (outcome, sink.0)
    }

    #[test]
    fn empty_scenario_completes_silently() {
        let (outcome, records) = run(&spec(json!([]), 10), &ModelRegistry::with_builtins(), &mut NoControl);
        assert_eq!(outcome, RunOutcome::Completed { steps: 10 });
        assert!(records.is_empty());
    }

    #[test]
    fn model_contract_violations_fail_the_run() {
        for (script, needle) in [
            (Script::UndeclaredTag, "not declared"),
            (Script::UndeclaredKey, "payload key `other`"),
            (Script::EngineTag, "reserved"),
            (Script::Fail(3), "boom"),
        ] {
            let (outcome, _) = run(&spec(json!([scripted("a")]), 10), &registry(script), &mut NoControl);
            let RunOutcome::Failed { reason } = outcome else { panic!("{outcome:?}") };
            assert!(reason.contains(needle) && reason.contains("`a`"), "{reason}");
        }
        let (outcome, _) = run(&spec(json!([scripted("a")]), 10), &registry(Script::Fail(3)), &mut NoControl);
        assert!(matches!(outcome, RunOutcome::Failed { reason } if reason.contains("step 3")));
    }

    #[test]
    fn termination_request_ends_after_the_step() {
        let (outcome, records) =
            run(&spec(json!([scripted("a")]), 100), &registry(Script::Terminate(4)), &mut NoControl);
        assert_eq!(outcome, RunOutcome::Completed { steps: 4 });
        assert_eq!(records.last().unwrap().step, 4);
    }

    #[test]
    fn invalid_scenario_fails_without_records() {
        let (outcome, records) =
            run(&spec(json!([scripted("a"), scripted("a")]), 5), &registry(Script::Quiet), &mut NoControl);
        assert!(matches!(outcome, RunOutcome::Failed { reason } if reason.contains("duplicate")));
        assert!(records.is_empty());
    }

    struct Scheduled {
        at: u64,
        directive: Directive,
        seen: Vec<u64>,
    }

    impl ControlSource for Scheduled {
        fn at_boundary(&mut self, clock: &SimClock) -> Directive {
            self.seen.push(clock.step);
            if clock.step == self.at {
                std::mem::take(&mut self.directive)
            } else {
                Directive::default()
            }
        }
    }

    #[test]
    fn stop_at_boundary() {
        let s = spec(json!([platform("p", "BLUE", 0.0, 100.0)]), 50);
        let mut control = Scheduled { at: 7, directive: Directive { stop: true, set_params: vec![] }, seen: vec![] };
        let (outcome, records) = run(&s, &ModelRegistry::with_builtins(), &mut control);
        assert_eq!(outcome, RunOutcome::Stopped { step: 7 });
        assert_eq!(records.last().unwrap().step, 7);
        assert_eq!(control.seen, (0..=7).collect::<Vec<_>>());
    }

    #[test]
    fn set_param_takes_effect_at_next_step() {
        let s = spec(json!([platform("p", "BLUE", 0.0, 100.0)]), 5);
        let change =
            SetParam { agent_id: "p".into(), param_path: "agents.p.params.speed_mps".into(), value: json!(200.0) };
        let mut control =
            Scheduled { at: 2, directive: Directive { stop: false, set_params: vec![change] }, seen: vec![] };
        let (_, records) = run(&s, &ModelRegistry::with_builtins(), &mut control);
        let x: Vec<f64> = records.iter().map(|r| r.payload["x"].as_f64().unwrap()).collect();
        assert_eq!(x, [0.0, 10.0, 20.0, 40.0, 60.0, 80.0]);
    }

    #[test]
    fn rejected_params_are_recorded() {
        let s = spec(json!([platform("p", "BLUE", 0.0, 100.0), scripted("q")]), 3);
        let changes = vec![
            SetParam { agent_id: "p".into(), param_path: "agents.p.params.speed_mps".into(), value: json!(-5) },
            SetParam { agent_id: "p".into(), param_path: "agents.p.params.speed_mps".into(), value: json!(1) },
            SetParam { agent_id: "q".into(), param_path: "agents.p.params.speed_mps".into(), value: json!(1) },
            SetParam { agent_id: "ghost".into(), param_path: "agents.ghost.params.x".into(), value: json!(1) },
        ];
        let mut control = Scheduled { at: 1, directive: Directive { stop: false, set_params: changes }, seen: vec![] };
        let (outcome, records) = run(&s, &registry(Script::Quiet), &mut control);
        assert_eq!(outcome, RunOutcome::Completed { steps: 3 });
        let rejected: Vec<&StepRecord> = records.iter().filter(|r| r.tag == tags::PARAM_REJECTED).collect();
        assert_eq!(rejected.len(), 2);
        assert_eq!((rejected[0].agent_id.as_str(), rejected[0].step), ("p", 2));
        assert!(rejected[0].payload["reason"].as_str().unwrap().contains("out of range"));
        assert_eq!(rejected[1].agent_id, "q");
        let speed = records.iter().find(|r| r.agent_id == "p" && r.step == 2 && r.tag == "status").unwrap();
        assert_eq!(speed.payload["speed_mps"].as_f64(), Some(1.0));
    }

    fn duel(target_speed: f64, range: f64) -> ScenarioSpec {
        let mut blue = platform("b", "BLUE", 0.0, 0.0);
        blue["components"] = json!([
            {"agent_id": "b-r", "side": "BLUE", "model": {"name": "range_sensor", "version": "1.0"},
             "params": {"range_m": 1.0e5, "p_detect": 1.0}},
            {"agent_id": "b-w", "side": "BLUE", "model": {"name": "wez_weapon", "version": "1.0"},
             "params": {"launch_range_m": 1.0e5, "missile_speed_mps": 800.0, "missile_turn_rate_rad_s": 1.0,
                        "hit_radius_m": 50.0, "max_flight_s": 5.0, "shots": 1}}
        ]);
        spec(json!([blue, platform("t", "RED", range, target_speed)]), 200)
    }

    #[test]
    fn stationary_target_is_hit() {
        let (_, records) = run(&duel(0.0, 1000.0), &ModelRegistry::with_builtins(), &mut NoControl);
        let launch = records.iter().find(|r| r.tag == tags::LAUNCH).unwrap();
        assert_eq!(launch.step, 2);
        let hit = records.iter().find(|r| r.tag == tags::HIT).unwrap();
        // Launched at the end of step 2; 80 m per step closes to 40 m on the 12th step of flight.
        assert_eq!((hit.agent_id.as_str(), hit.step), ("b-w.m1", 14));
        let dead = records.iter().find(|r| r.agent_id == "t" && r.step == 14 && r.tag == "status").unwrap();
        assert_eq!(dead.payload["alive"], Scalar::Bool(false));
        assert!(records.iter().all(|r| r.tag != tags::MISS));
    }

    #[test]
    fn receding_target_times_out() {
        let (_, records) = run(&duel(900.0, 1000.0), &ModelRegistry::with_builtins(), &mut NoControl);
        let miss = records.iter().find(|r| r.tag == tags::MISS).unwrap();
        assert_eq!(miss.payload["reason"].as_str(), Some("timeout"));
        assert_eq!(miss.step, 2 + 50);
        assert!(records.iter().all(|r| r.tag != tags::HIT));
    }

    #[test]
    fn missile_status_uses_spawn_id_and_side() {
        let (_, records) = run(&duel(0.0, 1000.0), &ModelRegistry::with_builtins(), &mut NoControl);
        let first = records.iter().find(|r| r.agent_id == "b-w.m1").unwrap();
        assert_eq!(first.step, 2);
        assert_eq!(first.payload["side"].as_str(), Some("BLUE"));
    }

    #[test]
    fn invocation_counter_tracks_steps() {
        let before = engine_invocations_on_this_thread();
        run(&spec(json!([]), 10), &ModelRegistry::with_builtins(), &mut NoControl);
        assert_eq!(engine_invocations_on_this_thread() - before, 11);
        assert!(engine_invocations() >= 11);
    }
}
