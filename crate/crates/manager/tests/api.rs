//! The HTTP API against a live manager and in-process nodes.

mod common;

use std::io::{BufRead, BufReader};
use std::time::Duration;

use asa_core::protocol::RunStatus;
use asa_core::scenario::ScenarioSpec;
use asa_manager::{ManagerConfig, ManagerHandle};
use common::{reference, reference_template, reference_value, Harness};
use reqwest::StatusCode;
use serde_json::{json, Value};

const HEARTBEAT: Duration = Duration::from_millis(200);

#[derive(Debug, Clone)]
struct SseEvent {
    event: String,
    id: Option<String>,
    data: Value,
}

/// Reads server-sent events until `stop` returns true or the stream ends.
fn read_events(h: &Harness, path: &str, mut stop: impl FnMut(&SseEvent) -> bool) -> Vec<SseEvent> {
    let res = h.http.get(h.url(path)).send().unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let mut out = Vec::new();
    let (mut event, mut id, mut data) = (String::new(), None, String::new());
    for line in BufReader::new(res).lines() {
        let line = line.unwrap();
        if line.is_empty() {
            if !data.is_empty() {
                let ev = SseEvent {
                    event: std::mem::take(&mut event),
                    id: id.take(),
                    data: serde_json::from_str(&data).unwrap(),
                };
                data.clear();
                let done = stop(&ev);
                out.push(ev);
                if done {
                    break;
                }
            }
            continue;
        }
        if let Some(v) = line.strip_prefix("event:") {
            event = v.trim().to_owned();
        } else if let Some(v) = line.strip_prefix("id:") {
            id = Some(v.trim().to_owned());
        } else if let Some(v) = line.strip_prefix("data:") {
            data.push_str(v.strip_prefix(' ').unwrap_or(v));
        }
    }
    out
}

fn spec_of(entry: &Value) -> ScenarioSpec {
    serde_json::from_value(entry["body"].clone()).unwrap()
}

fn step_numbers(events: &[SseEvent]) -> Vec<u64> {
    events.iter().filter(|e| e.event == "step").map(|e| e.data["step"].as_u64().unwrap()).collect()
}

#[test]
fn scenario_crud_with_revisions() {
    let h = Harness::new(HEARTBEAT);
    let (s, created) = h.post("/scenarios", &reference_value());
    assert_eq!(s, StatusCode::CREATED, "{created}");
    assert_eq!(created["id"], "reference-2v1");
    assert_eq!(created["revision"], 1);
    let (s, _) = h.post("/scenarios", &reference_value());
    assert_eq!(s, StatusCode::CONFLICT);

    let got = h.ok_get("/scenarios/reference-2v1");
    assert_eq!(spec_of(&got), reference());

    let mut edited = reference_value();
    edited["description"] = json!("edited");
    let (s, _) = h.put("/scenarios/reference-2v1", &edited, Some(7));
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = h.put("/scenarios/reference-2v1", &edited, Some(1));
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["revision"], 2);

    let (s, _) = h.post("/scenarios?id=other", &reference_value());
    assert_eq!(s, StatusCode::CREATED);
    let listed = h.ok_get("/scenarios?prefix=ref");
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(h.ok_get("/scenarios").as_array().unwrap().len(), 2);

    let (s, _) = h.delete("/scenarios/reference-2v1");
    assert_eq!(s, StatusCode::OK);
    let (s, _) = h.get("/scenarios/reference-2v1");
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[test]
fn invalid_scenario_lists_every_violation() {
    let h = Harness::new(HEARTBEAT);
    let mut bad = reference_value();
    bad["agents"][0]["model"]["name"] = json!("no_such_model");
    bad["agents"][2]["params"]["speed_mps"] = json!("fast");
    let (s, v) = h.post("/scenarios", &bad);
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let kinds: Vec<&str> = v["violations"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"unknown_model"), "{v}");
    assert!(kinds.contains(&"param_type"), "{v}");
    let (s, v) = h.post("/scenarios", &json!({"name": "x"}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
}

#[test]
fn invalid_template_is_refused() {
    let h = Harness::new(HEARTBEAT);
    let mut t = reference_template();
    t["placeholders"][0]["path"] = json!("agents.nobody.params.speed_mps");
    let (s, v) = h.post("/templates", &t);
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["violations"][0]["kind"], "unresolved_path", "{v}");
    let (s, v) = h.post("/templates", &reference_template());
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["id"], "reference-2v1");
}

#[test]
fn created_entries_survive_a_restart() {
    let mut h = Harness::new(HEARTBEAT);
    h.post("/scenarios", &reference_value());
    h.add_template("ref", &reference_template());
    let id = h.submit(&json!({"template_id": "ref", "seed": 4, "bindings": [{"blue_speed": 200.0}]}));
    h.restart_manager();
    assert_eq!(spec_of(&h.ok_get("/scenarios/reference-2v1")), reference());
    assert_eq!(h.ok_get("/templates/ref")["revision"], 1);
    let batch = h.ok_get(&format!("/batches/{id}"));
    assert_eq!(batch["rollup"]["PENDING"], 1);
    // The restored run is still scheduled once a node appears.
    h.add_node("n1", 1);
    h.wait_batch(&id, Duration::from_secs(30));
    assert_eq!(h.run(&format!("{id}-00000"))["state"], "COMPLETED");
}

#[test]
fn unknown_ids_are_404() {
    let h = Harness::new(HEARTBEAT);
    for path in
        ["/runs/nope", "/batches/nope", "/scenarios/nope", "/templates/nope", "/runs/nope/records", "/runs/nope/stream"]
    {
        assert_eq!(h.get(path).0, StatusCode::NOT_FOUND, "{path}");
    }
    assert_eq!(h.post("/runs/nope/control", &json!({"command": "pause"})).0, StatusCode::NOT_FOUND);
    let (s, v) = h.post("/batches", &json!({"template_id": "nope", "seed": 1, "bindings": []}));
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_template");
}

#[test]
fn bad_bindings_are_422_with_their_indices() {
    let h = Harness::new(HEARTBEAT);
    h.add_template("ref", &reference_template());
    let bindings = json!([{"blue_speed": 200.0}, {"blue_speed": "fast"}, {"blue_speed": 250.0}, {"blue_speed": 999.0}]);
    let (s, v) = h.post("/batches", &json!({"template_id": "ref", "seed": 1, "bindings": bindings}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let indices: Vec<u64> = v["violations"].as_array().unwrap().iter().map(|e| e["index"].as_u64().unwrap()).collect();
    assert_eq!(indices, vec![1, 3], "{v}");
    assert!(h.ok_get("/batches").as_array().unwrap().is_empty());

    let both = json!({"template_id": "ref", "seed": 1, "bindings": [], "doe": {"full_factorial": []}});
    assert_eq!(h.post("/batches", &both).0, StatusCode::UNPROCESSABLE_ENTITY);
    let neither = json!({"template_id": "ref", "seed": 1});
    assert_eq!(h.post("/batches", &neither).0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_doe =
        json!({"template_id": "ref", "seed": 1, "doe": {"latin_hypercube": {"n": 0, "ranges": [], "seed": 1}}});
    assert_eq!(h.post("/batches", &bad_doe).0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[test]
fn empty_batch_is_complete_at_once() {
    let h = Harness::new(HEARTBEAT);
    h.add_template("ref", &reference_template());
    let (s, v) = h.post("/batches", &json!({"template_id": "ref", "seed": 1, "bindings": []}));
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["complete"], true);
    assert!(v["run_ids"].as_array().unwrap().is_empty());
    assert!(v["rollup"].as_object().unwrap().values().all(|n| n == 0));
}

#[test]
fn resubmission_gets_a_new_id_and_the_same_seeds() {
    let h = Harness::new(HEARTBEAT);
    h.add_template("ref", &reference_template());
    let body = json!({"template_id": "ref", "seed": 99, "doe": {"latin_hypercube": {"n": 5, "ranges": [{"name": "blue_speed", "lo": 200.0, "hi": 300.0}], "seed": 3}}});
    let a = h.submit(&body);
    let b = h.submit(&body);
    assert_ne!(a, b);
    let seeds = |id: &str| -> Vec<u64> {
        h.ok_get(&format!("/runs?batch_id={id}"))
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["seed"].as_u64().unwrap())
            .collect()
    };
    assert_eq!(seeds(&a).len(), 5);
    assert_eq!(seeds(&a), seeds(&b));
}

#[test]
fn pending_runs_accept_only_stop() {
    let h = Harness::new(HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id = h.submit(&json!({"template_id": "ref", "seed": 1, "bindings": [{"blue_speed": 200.0}]}));
    let run = format!("{id}-00000");
    let (s, v) = h.post(&format!("/runs/{run}/control"), &json!({"command": "pause"}));
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "illegal_transition");
    let (s, v) = h.post(&format!("/runs/{run}/control"), &json!({"command": "stop"}));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "STOPPED");
    assert_eq!(v["attempts"], 0);
    let (s, _) = h.post(&format!("/runs/{run}/control"), &json!({"command": "bogus"}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.ok_get(&format!("/batches/{id}"))["complete"], true);
}

#[test]
fn live_control_round_trip() {
    let h = Harness::with_nodes(&[("n1", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id =
        h.submit(&json!({"template_id": "ref", "seed": 2, "bindings": [{"blue_speed": 240.0}], "speed_factor": 20.0}));
    let run = format!("{id}-00000");
    h.wait_state(&run, "RUNNING", Duration::from_secs(10));
    let control = |body: Value| h.post(&format!("/runs/{run}/control"), &body);
    let (s, v) = control(json!({"command": "pause"}));
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("PAUSED")), "{v}");
    let (s, _) = control(json!({"command": "pause"}));
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = control(json!({"command": "set_speed", "factor": -1.0}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let set = |value: Value| json!({"command": "set_param", "agent_id": "blue1", "param_path": "agents.blue1.params.speed_mps", "value": value});
    let (s, v) = control(set(json!(261.5)));
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, v) = control(set(json!("fast")));
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, v) = control(json!({"command": "resume"}));
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("RUNNING")), "{v}");
    control(json!({"command": "set_speed", "factor": 0.0}));
    h.wait_state(&run, "COMPLETED", Duration::from_secs(30));
    let (s, v) = control(json!({"command": "set_speed", "factor": 1.0}));
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    // Both changes reached the engine: one applied, one refused on record.
    let records = h.records(&run);
    assert!(records
        .iter()
        .any(|r| r.agent_id == "blue1" && r.tag == "status" && r.payload["speed_mps"].as_f64() == Some(261.5)));
    let rejected: Vec<_> = records.iter().filter(|r| r.tag == "param_rejected").collect();
    assert_eq!(rejected.len(), 1, "{rejected:?}");
}

#[test]
fn stopping_a_live_run_keeps_its_prefix() {
    let h = Harness::with_nodes(&[("n1", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id =
        h.submit(&json!({"template_id": "ref", "seed": 8, "bindings": [{"blue_speed": 240.0}], "speed_factor": 20.0}));
    let run = format!("{id}-00000");
    h.wait_for(Duration::from_secs(10), "progress", || {
        (h.run(&run)["progress_step"].as_u64() >= Some(100)).then_some(())
    });
    let (s, v) = h.post(&format!("/runs/{run}/control"), &json!({"command": "stop"}));
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("STOPPED")), "{v}");
    let records = h.records(&run);
    let last = records.last().unwrap().step;
    assert!((100..1000).contains(&last), "last step {last}");
    let full = common::engine_log(&h.request_of(&run));
    assert!(full.starts_with(&common::log_text(&records)));
}

#[test]
fn records_query_filters_by_step_and_tag() {
    let h = Harness::with_nodes(&[("n1", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id = h.submit(&json!({"template_id": "ref", "seed": 6, "bindings": [{"blue_speed": 240.0}]}));
    h.wait_batch(&id, Duration::from_secs(30));
    let run = format!("{id}-00000");
    let page = h.ok_get(&format!("/runs/{run}/records?from_step=10&to_step=12&tag=status"));
    assert_eq!(page["attempt"], 1);
    let recs = page["records"].as_array().unwrap();
    assert!(!recs.is_empty());
    assert!(recs.iter().all(|r| r["tag"] == "status" && (10..=12).contains(&r["step"].as_u64().unwrap())));
    let all = h.records(&run);
    let want: Vec<_> = all.iter().filter(|r| r.tag == "status" && (10..=12).contains(&r.step)).collect();
    assert_eq!(recs.len(), want.len());
    assert_eq!(h.get(&format!("/runs/{run}/records?attempt=9")).0, StatusCode::NOT_FOUND);
}

#[test]
fn live_stream_is_ordered_and_gap_free() {
    let h = Harness::with_nodes(&[("n1", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id =
        h.submit(&json!({"template_id": "ref", "seed": 12, "bindings": [{"blue_speed": 240.0}], "speed_factor": 50.0}));
    let run = format!("{id}-00000");
    h.wait_state(&run, "RUNNING", Duration::from_secs(10));
    let events = read_events(&h, &format!("/runs/{run}/stream"), |e| e.event == "end");
    assert_eq!(events.first().unwrap().event, "state");
    assert_eq!(events.last().unwrap().event, "end");
    assert_eq!(events.last().unwrap().data["state"], "COMPLETED");
    let steps = step_numbers(&events);
    assert_eq!(steps, (0..=1000).collect::<Vec<_>>());
    let tags: std::collections::BTreeSet<&str> = events
        .iter()
        .filter(|e| e.event == "step")
        .flat_map(|e| e.data["records"].as_array().unwrap().iter().map(|r| r["tag"].as_str().unwrap()))
        .collect();
    assert!(
        tags.contains("status") && tags.iter().all(|t| ["status", "launch", "hit", "miss"].contains(t)),
        "{tags:?}"
    );
    let ids: Vec<String> = events.iter().filter(|e| e.event == "step").map(|e| e.id.clone().unwrap()).collect();
    assert_eq!(ids.first().map(String::as_str), Some("0"));

    // Streaming a finished run replays from the log, then ends.
    let again = read_events(&h, &format!("/runs/{run}/stream?from_step=990"), |e| e.event == "end");
    assert_eq!(step_numbers(&again), (990..=1000).collect::<Vec<_>>());
    assert_eq!(again.first().unwrap().data["state"], "COMPLETED");
}

#[test]
fn resubscribing_mid_run_continues_where_it_left_off() {
    let h = Harness::with_nodes(&[("n1", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id =
        h.submit(&json!({"template_id": "ref", "seed": 13, "bindings": [{"blue_speed": 240.0}], "speed_factor": 40.0}));
    let run = format!("{id}-00000");
    h.wait_state(&run, "RUNNING", Duration::from_secs(10));
    let first = read_events(&h, &format!("/runs/{run}/stream"), |e| e.event == "step" && e.data["step"] == 200);
    let mut steps = step_numbers(&first);
    let rest = read_events(&h, &format!("/runs/{run}/stream?from_step=201"), |e| e.event == "end");
    steps.extend(step_numbers(&rest));
    assert_eq!(steps, (0..=1000).collect::<Vec<_>>());
}

#[test]
fn global_events_report_run_changes() {
    let h = Harness::with_nodes(&[("n1", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let hh = &h;
    let events = std::thread::scope(|s| {
        let reader =
            s.spawn(move || read_events(hh, "/events", |e| e.event == "run" && e.data["state"] == "COMPLETED"));
        std::thread::sleep(Duration::from_millis(300));
        hh.submit(&json!({"template_id": "ref", "seed": 1, "bindings": [{"blue_speed": 240.0}]}));
        reader.join().unwrap()
    });
    let states: Vec<&str> =
        events.iter().filter(|e| e.event == "run").map(|e| e.data["state"].as_str().unwrap()).collect();
    // Each event is the run as of one serialized mutation, so submission
    // and assignment can fold into one.
    assert!(matches!(states.first(), Some(&"PENDING" | &"ASSIGNED")), "{states:?}");
    assert!(states.contains(&"RUNNING"), "{states:?}");
    assert_eq!(states.last(), Some(&"COMPLETED"));
}

#[test]
fn analysis_covers_completed_runs_and_warns_about_the_rest() {
    let h = Harness::with_nodes(&[("n1", 2)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let id = h
        .submit(&json!({"template_id": "ref", "seed": 21, "bindings": [{"blue_speed": 230.0}, {"blue_speed": 270.0}]}));
    h.wait_batch(&id, Duration::from_secs(30));
    let metrics = json!({"metrics": [
        {"name": "launches", "reducer": "count_by_tag", "tag": "launch"},
        {"name": "blue_alive", "reducer": "survival_count", "side": "BLUE"}
    ]});
    let (s, v) = h.post(&format!("/batches/{id}/analyze"), &metrics);
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert_eq!(v["metrics"]["launches"]["n"], 2);
    assert!(v["warnings"].as_array().unwrap().is_empty());
    for row in v["runs"].as_array().unwrap() {
        let run = row["run_id"].as_str().unwrap();
        let launches = h.records(run).iter().filter(|r| r.tag == "launch").count();
        assert_eq!(row["metrics"]["launches"].as_f64(), Some(launches as f64));
    }
    let stored = h.ok_get(&format!("/analyses/{}", v["analysis_id"].as_str().unwrap()));
    assert_eq!(stored["body"]["runs"], v["runs"]);

    let stopped =
        h.submit(&json!({"template_id": "ref", "seed": 1, "bindings": [{"blue_speed": 230.0}], "speed_factor": 1.0}));
    h.post(&format!("/runs/{stopped}-00000/control"), &json!({"command": "stop"}));
    h.wait_batch(&stopped, Duration::from_secs(10));
    let (s, v) = h.post(&format!("/batches/{stopped}/analyze"), &metrics);
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["metrics"]["launches"]["undefined"], 1);
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);

    let bad = json!({"metrics": [{"name": "x", "reducer": "final_value", "agent_id": "blue1", "key": "no_such_key"}]});
    assert_eq!(h.post(&format!("/batches/{id}/analyze"), &bad).0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.post("/batches/nope/analyze", &metrics).0, StatusCode::NOT_FOUND);
}

#[test]
fn transition_log_has_single_assignment() {
    let h = Harness::with_nodes(&[("n1", 1), ("n2", 1)], HEARTBEAT);
    h.add_template("ref", &reference_template());
    let bindings: Vec<Value> = (0..6).map(|i| json!({"blue_speed": 200.0 + 20.0 * i as f64})).collect();
    let id = h.submit(&json!({"template_id": "ref", "seed": 1, "bindings": bindings}));
    h.wait_batch(&id, Duration::from_secs(60));
    let log: Vec<asa_manager::LogEntry> = serde_json::from_value(h.ok_get("/transitions")).unwrap();
    let (peak, finals) = asa_manager::replay_log(&log);
    assert!(peak <= 2, "peak {peak}");
    assert_eq!(finals.values().filter(|s| **s == RunStatus::Completed).count(), 6);
    let seqs: Vec<u64> = log.iter().map(|e| e.seq).collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
    let tail = h.ok_get(&format!("/transitions?since={}", seqs[seqs.len() - 2]));
    assert_eq!(tail.as_array().unwrap().len(), 2);
    let nodes = h.ok_get("/nodes");
    assert!(nodes.as_array().unwrap().iter().all(|n| n["running"].as_array().unwrap().is_empty()));
}

#[test]
fn models_and_health_are_served() {
    let h = Harness::new(HEARTBEAT);
    assert_eq!(h.ok_get("/health")["status"], "ok");
    let names: Vec<String> =
        h.ok_get("/models").as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap().to_owned()).collect();
    for builtin in ["waypoint_platform", "range_sensor", "wez_weapon"] {
        assert!(names.iter().any(|n| n == builtin), "{names:?}");
    }
}

#[test]
fn ui_assets_are_served_under_ui() {
    let data = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<!doctype html><title>asa</title>").unwrap();
    let mut config = ManagerConfig::new(data.path());
    config.ui_dir = Some(ui.path().to_owned());
    let m = ManagerHandle::start_local(config).unwrap();
    let res = reqwest::blocking::get(format!("{}/ui/index.html", m.base_url())).unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert!(res.text().unwrap().contains("<title>asa</title>"));
    let missing = reqwest::blocking::get(format!("{}/ui/missing.js", m.base_url())).unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
}
