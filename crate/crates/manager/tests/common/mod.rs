//! A manager plus in-process node daemons on localhost, driven over HTTP.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use asa_core::canonical;
use asa_core::engine::{run_simulation, ModelRegistry, NoControl, RunOutcome, VecSink};
use asa_core::scenario::{ExecutionRequest, ScenarioSpec};
use asa_core::StepRecord;
use asa_manager::{Liveness, ManagerConfig, ManagerHandle};
use asa_node::{NodeConfig, NodeDaemon};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

pub fn reference() -> ScenarioSpec {
    serde_json::from_str(&std::fs::read_to_string(fixture("reference_2v1.json")).unwrap()).unwrap()
}

pub fn reference_value() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("reference_2v1.json")).unwrap()).unwrap()
}

/// The reference scenario with blue1's speed left open.
pub fn reference_template() -> Value {
    json!({
        "base": reference_value(),
        "placeholders": [
            {"name": "blue_speed", "path": "agents.blue1.params.speed_mps", "kind": "number", "bounds": [150.0, 350.0]}
        ]
    })
}

pub fn log_text(records: &[StepRecord]) -> String {
    records.iter().map(|r| canonical::to_string(r) + "\n").collect()
}

/// What the engine emits for a request when run directly, uninterrupted.
pub fn engine_log(request: &ExecutionRequest) -> String {
    let mut sink = VecSink::default();
    let outcome = run_simulation(
        &request.scenario,
        &ModelRegistry::with_builtins(),
        &request.request_id,
        request.seed,
        &mut sink,
        &mut NoControl,
    );
    assert!(matches!(outcome, RunOutcome::Completed { .. }), "{outcome:?}");
    log_text(&sink.0)
}

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub manager: Option<ManagerHandle>,
    pub nodes: Vec<(String, Option<NodeDaemon>)>,
    pub heartbeat: Duration,
    pub http: Client,
}

impl Harness {
    /// A manager with liveness tuned to `heartbeat` and no nodes.
    pub fn new(heartbeat: Duration) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut h = Self {
            dir,
            manager: None,
            nodes: Vec::new(),
            heartbeat,
            http: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
        };
        h.start_manager();
        h
    }

    pub fn with_nodes(nodes: &[(&str, u32)], heartbeat: Duration) -> Self {
        let mut h = Self::new(heartbeat);
        for (id, cap) in nodes {
            h.add_node(id, *cap);
        }
        h.wait_live(nodes.len());
        h
    }

    pub fn start_manager(&mut self) {
        let mut config = ManagerConfig::new(self.dir.path());
        config.liveness = Liveness { interval_ms: self.heartbeat.as_millis() as u64, ..Liveness::default() };
        self.manager = Some(ManagerHandle::start_local(config).unwrap());
    }

    /// Stops the manager and opens a fresh one on the same data directory.
    pub fn restart_manager(&mut self) {
        if let Some(m) = self.manager.take() {
            m.shutdown();
        }
        self.start_manager();
    }

    pub fn handle(&self) -> &ManagerHandle {
        self.manager.as_ref().expect("manager running")
    }

    pub fn add_node(&mut self, id: &str, capacity: u32) {
        let mut config = NodeConfig::new(id, self.handle().bound.nodes.to_string());
        config.capacity = capacity;
        config.heartbeat_interval = self.heartbeat;
        config.backoff_initial = Duration::from_millis(100);
        config.backoff_max = Duration::from_millis(500);
        let daemon = NodeDaemon::start(config, Arc::new(ModelRegistry::with_builtins())).unwrap();
        self.nodes.push((id.to_owned(), Some(daemon)));
    }

    /// Abruptly stops a node: no Bye, runs abandoned.
    pub fn kill_node(&mut self, id: &str) {
        let slot = self.nodes.iter_mut().find(|(n, _)| n == id).expect("known node");
        slot.1.take().expect("node running").kill();
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.handle().base_url(), path)
    }

    fn decode(res: reqwest::blocking::Response) -> (StatusCode, Value) {
        let status = res.status();
        let text = res.text().unwrap();
        let body =
            if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
        (status, body)
    }

    pub fn get(&self, path: &str) -> (StatusCode, Value) {
        Self::decode(self.http.get(self.url(path)).send().unwrap())
    }

    pub fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        Self::decode(self.http.post(self.url(path)).json(body).send().unwrap())
    }

    pub fn put(&self, path: &str, body: &Value, if_match: Option<u64>) -> (StatusCode, Value) {
        let mut req = self.http.put(self.url(path)).json(body);
        if let Some(rev) = if_match {
            req = req.header("If-Match", format!("\"{rev}\""));
        }
        Self::decode(req.send().unwrap())
    }

    pub fn delete(&self, path: &str) -> (StatusCode, Value) {
        Self::decode(self.http.delete(self.url(path)).send().unwrap())
    }

    pub fn ok_get(&self, path: &str) -> Value {
        let (s, v) = self.get(path);
        assert_eq!(s, StatusCode::OK, "GET {path}: {v}");
        v
    }

    pub fn add_template(&self, id: &str, template: &Value) {
        let (s, v) = self.post(&format!("/templates?id={id}"), template);
        assert_eq!(s, StatusCode::CREATED, "{v}");
    }

    /// Submits a batch and returns its id.
    pub fn submit(&self, body: &Value) -> String {
        let (s, v) = self.post("/batches", body);
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["batch_id"].as_str().unwrap().to_owned()
    }

    pub fn wait_live(&self, n: usize) {
        self.wait_for(Duration::from_secs(10), "nodes to register", || {
            let nodes = self.ok_get("/nodes");
            let live = nodes.as_array().unwrap().iter().filter(|n| n["status"] == "LIVE").count();
            (live >= n).then_some(())
        });
    }

    pub fn wait_for<T>(&self, within: Duration, what: &str, mut probe: impl FnMut() -> Option<T>) -> T {
        let deadline = Instant::now() + within;
        loop {
            if let Some(t) = probe() {
                return t;
            }
            assert!(Instant::now() < deadline, "timed out waiting for {what}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn wait_batch(&self, batch_id: &str, within: Duration) -> Value {
        self.wait_for(within, "batch completion", || {
            let b = self.ok_get(&format!("/batches/{batch_id}"));
            (b["complete"] == true).then_some(b)
        })
    }

    pub fn run(&self, run_id: &str) -> Value {
        self.ok_get(&format!("/runs/{run_id}"))
    }

    pub fn wait_state(&self, run_id: &str, state: &str, within: Duration) -> Value {
        self.wait_for(within, &format!("{run_id} to reach {state}"), || {
            let r = self.run(run_id);
            (r["state"] == state).then_some(r)
        })
    }

    pub fn records(&self, run_id: &str) -> Vec<StepRecord> {
        let page = self.ok_get(&format!("/runs/{run_id}/records"));
        serde_json::from_value(page["records"].clone()).unwrap()
    }

    pub fn request_of(&self, run_id: &str) -> ExecutionRequest {
        serde_json::from_value(self.run(run_id)["request"].clone()).unwrap()
    }
}
