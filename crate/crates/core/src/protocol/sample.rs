//! Seeded generator of arbitrary valid messages, for fuzzing codecs and peers.

use serde_json::{json, Map, Value};

use super::*;
use crate::engine::record::{Payload, Scalar};
use crate::rng::SplitMix64;
use crate::scenario::{AgentSpec, BatchOrigin, ModelRef, ScenarioSpec, Side, SimSettings};

const ALPHABET: &[char] = &['a', 'b', 'z', 'Q', '0', '9', '_', '-', '.', ' ', '"', '\\', '\n', 'é', '✈', '𝔸'];

fn text(rng: &mut SplitMix64) -> String {
    let n = rng.below(12) as usize;
    (0..n).map(|_| ALPHABET[rng.below(ALPHABET.len() as u64) as usize]).collect()
}

fn ident(rng: &mut SplitMix64) -> String {
    format!("a{}", rng.below(1000))
}

fn real(rng: &mut SplitMix64) -> f64 {
    match rng.below(4) {
        0 => rng.below(1000) as f64,
        1 => -(rng.next_f64() * 1e6),
        2 => rng.next_f64() * 10f64.powi(rng.below(40) as i32 - 20),
        _ => f64::from_bits(rng.next_u64() >> 2),
    }
}

fn value(rng: &mut SplitMix64, depth: u32) -> Value {
    match rng.below(if depth > 2 { 4 } else { 6 }) {
        0 => Value::Bool(rng.bernoulli(0.5)),
        1 => json!(rng.next_u64()),
        2 => json!(real(rng)),
        3 => Value::String(text(rng)),
        4 => Value::Array((0..rng.below(4)).map(|_| value(rng, depth + 1)).collect()),
        _ => Value::Object((0..rng.below(4)).map(|_| (text(rng), value(rng, depth + 1))).collect::<Map<_, _>>()),
    }
}

fn scalar(rng: &mut SplitMix64) -> Scalar {
    match rng.below(3) {
        0 => Scalar::Bool(rng.bernoulli(0.5)),
        1 => Scalar::Number(real(rng)),
        _ => Scalar::Text(text(rng)),
    }
}

fn side(rng: &mut SplitMix64) -> Side {
    [Side::Blue, Side::Red, Side::Neutral][rng.below(3) as usize]
}

fn agent(rng: &mut SplitMix64, depth: u32) -> AgentSpec {
    AgentSpec {
        agent_id: ident(rng),
        side: side(rng),
        model: ModelRef::new(text(rng), text(rng)),
        params: (0..rng.below(4)).map(|_| (text(rng), value(rng, 1))).collect(),
        components: if depth < 2 { (0..rng.below(2)).map(|_| agent(rng, depth + 1)).collect() } else { Vec::new() },
    }
}

fn request(rng: &mut SplitMix64) -> ExecutionRequest {
    ExecutionRequest {
        request_id: ident(rng),
        scenario: ScenarioSpec {
            name: text(rng),
            description: text(rng),
            sim: SimSettings { step_dt: real(rng).abs(), max_steps: rng.next_u64(), seed: rng.next_u64() },
            agents: (0..rng.below(3)).map(|_| agent(rng, 0)).collect(),
        },
        seed: rng.next_u64(),
        origin: BatchOrigin { batch_id: ident(rng), index: rng.next_u64() },
    }
}

fn record(rng: &mut SplitMix64) -> StepRecord {
    let payload: Payload = (0..rng.below(5)).map(|_| (text(rng), scalar(rng))).collect();
    StepRecord {
        run_id: ident(rng),
        step: rng.next_u64(),
        sim_time: real(rng),
        tag: text(rng),
        agent_id: ident(rng),
        payload,
    }
}

fn command(rng: &mut SplitMix64) -> ControlCommand {
    match rng.below(6) {
        0 => ControlCommand::Play,
        1 => ControlCommand::Pause,
        2 => ControlCommand::Resume,
        3 => ControlCommand::Stop,
        4 => ControlCommand::SetSpeed { factor: real(rng).abs() },
        _ => ControlCommand::SetParam(SetParam { agent_id: ident(rng), param_path: text(rng), value: value(rng, 0) }),
    }
}

fn opt_text(rng: &mut SplitMix64) -> Option<String> {
    rng.bernoulli(0.5).then(|| text(rng))
}

/// One message of a uniformly chosen type with random contents.
pub fn message(rng: &mut SplitMix64) -> Message {
    match rng.below(10) {
        0 => Message::Hello(Hello { node_id: text(rng), capacity: rng.next_u64() as u32 }),
        1 => Message::Heartbeat(Heartbeat {
            node_id: text(rng),
            running_run_ids: (0..rng.below(4)).map(|_| text(rng)).collect(),
        }),
        2 => Message::Assign(Assign { execution_request: request(rng) }),
        3 => Message::AssignAck(AssignAck { run_id: text(rng), accepted: rng.bernoulli(0.5), reason: opt_text(rng) }),
        4 => Message::Control(Control { run_id: text(rng), command: command(rng) }),
        5 => Message::RunStateChange(RunStateChange {
            run_id: text(rng),
            state: RunStatus::ALL[rng.below(7) as usize],
            detail: opt_text(rng),
        }),
        6 => Message::RecordBatch(RecordBatch {
            run_id: text(rng),
            records: (0..rng.below(5)).map(|_| record(rng)).collect(),
        }),
        7 => Message::RecordAck(RecordAck {
            run_id: text(rng),
            through_step: rng.bernoulli(0.8).then(|| rng.next_u64()),
        }),
        8 => Message::Bye(Bye { node_id: text(rng) }),
        _ => Message::Error(ErrorMsg { code: text(rng), text: text(rng) }),
    }
}
