use std::path::PathBuf;

use asa_core::datastore::{Datastore, Kind, StepRange, StoreError};
use asa_core::engine::record::Scalar;
use asa_core::StepRecord;

fn golden() -> Vec<StepRecord> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_2v1.jsonl");
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Chunks a stream into batches that end on step boundaries, as nodes send them.
fn step_batches(records: &[StepRecord], steps_per_batch: u64) -> Vec<&[StepRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        let boundary = i == records.len() || records[i].step / steps_per_batch != records[start].step / steps_per_batch;
        if boundary {
            out.push(&records[start..i]);
            start = i;
        }
    }
    out
}

#[test]
fn million_records_read_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Datastore::open(dir.path()).unwrap();
    let agents = ["a1", "a2", "b1", "b2", "c1"];
    let make = |step: u64| -> Vec<StepRecord> {
        agents
            .iter()
            .map(|a| StepRecord {
                agent_id: (*a).into(),
                payload: [
                    ("x".to_owned(), Scalar::Number(step as f64 * 1.5)),
                    ("ok".to_owned(), Scalar::Bool(step.is_multiple_of(2))),
                ]
                .into(),
                run_id: "big".into(),
                sim_time: step as f64 * 0.1,
                step,
                tag: "status".into(),
            })
            .collect()
    };
    let steps = 200_000u64;
    for chunk in (0..steps).collect::<Vec<_>>().chunks(500) {
        let batch: Vec<StepRecord> = chunk.iter().flat_map(|&s| make(s)).collect();
        ds.records.append("big", 1, &batch).unwrap();
    }
    let mut n = 0u64;
    let mut next = 0u64;
    ds.records
        .scan("big", None, StepRange::ALL, |r| {
            assert_eq!(r, make(next / 5)[(next % 5) as usize]);
            next += 1;
            n += 1;
        })
        .unwrap();
    assert_eq!(n, 1_000_000);
    let mid = ds.records.read("big", None, StepRange { from: 123_456, to: 123_457 }, None).unwrap();
    assert_eq!(mid, [make(123_456), make(123_457)].concat());
}

#[test]
fn golden_log_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Datastore::open(dir.path()).unwrap();
    let records: Vec<StepRecord> = golden()
        .into_iter()
        .map(|mut r| {
            r.run_id = "ref".into();
            r
        })
        .collect();
    for batch in step_batches(&records, 50) {
        ds.records.append("ref", 1, batch).unwrap();
    }
    ds.records.mark_completed("ref", 1).unwrap();
    assert_eq!(ds.records.read("ref", None, StepRange::ALL, None).unwrap(), records);
    let hits = ds.records.read("ref", None, StepRange::ALL, Some("hit")).unwrap();
    let expected: Vec<&StepRecord> = records.iter().filter(|r| r.tag == "hit").collect();
    assert_eq!(hits.iter().collect::<Vec<_>>(), expected);
    assert_eq!(hits.len(), 1);
    let step_k = ds.records.read("ref", None, StepRange { from: 701, to: 701 }, None).unwrap();
    assert!(!step_k.is_empty() && step_k.iter().all(|r| r.step == 701));
}

#[test]
fn tombstoned_scenario_keeps_its_runs_readable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Datastore::open(dir.path()).unwrap();
    ds.catalog.create(Kind::Scenario, "s1", serde_json::json!({"name": "s1"})).unwrap();
    let records: Vec<StepRecord> = golden()
        .into_iter()
        .take(30)
        .map(|mut r| {
            r.run_id = "run1".into();
            r
        })
        .collect();
    ds.records.append("run1", 1, &records).unwrap();
    ds.catalog.delete(Kind::Scenario, "s1", None).unwrap();
    assert!(matches!(ds.catalog.get(Kind::Scenario, "s1"), Err(StoreError::UnknownId { .. })));
    assert_eq!(ds.records.read("run1", None, StepRange::ALL, None).unwrap(), records);
}

#[test]
fn killed_writer_loses_only_the_torn_line() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<StepRecord> = golden()
        .into_iter()
        .take(200)
        .map(|mut r| {
            r.run_id = "k".into();
            r
        })
        .collect();
    {
        let ds = Datastore::open(dir.path()).unwrap();
        ds.records.append("k", 1, &records[..100]).unwrap();
    }
    let log = dir.path().join("runs/k/1/records.jsonl");
    let mut bytes = std::fs::read(&log).unwrap();
    let cut = bytes.len() - 7;
    bytes.truncate(cut);
    std::fs::write(&log, &bytes).unwrap();

    let ds = Datastore::open(dir.path()).unwrap();
    let survivors = ds.records.read("k", None, StepRange::ALL, None).unwrap();
    assert_eq!(survivors, records[..99]);
    let through = ds.records.append("k", 1, &records[99..]).unwrap();
    assert_eq!(through, Some(records[199].step));
    assert_eq!(ds.records.read("k", None, StepRange::ALL, None).unwrap(), records);
}
