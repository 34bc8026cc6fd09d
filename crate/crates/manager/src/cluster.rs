//! Authoritative run and node state.
//!
//! Every mutation goes through [`Cluster`] while the caller holds the one
//! manager lock, and every state change is appended to a totally ordered
//! transition log. Methods return the frames to send; the cluster itself
//! does no I/O.

use std::collections::{BTreeMap, BTreeSet};

use asa_core::protocol::{error_code, Assign, Control, ControlCommand, ErrorMsg, Message, RunStatus};
use asa_core::scenario::{BindingSet, ExecutionRequest};
use serde::{Deserialize, Serialize};

pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeStatus {
    Live,
    Suspect,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub node_id: String,
    pub address: String,
    pub capacity: u32,
    /// Runs this node holds in ASSIGNED, RUNNING or PAUSED.
    pub running: BTreeSet<String>,
    pub last_heartbeat_ms: u64,
    pub status: NodeStatus,
    pub connected: bool,
    /// Refused an assignment for capacity; skipped until its next heartbeat.
    #[serde(skip)]
    saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub state: RunStatus,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub batch_id: String,
    pub index: u64,
    /// Submission order, for FIFO scheduling.
    pub seq: u64,
    pub request: ExecutionRequest,
    pub state: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    /// Assignments so far; the current attempt's record log is numbered by it.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub transitions: Vec<Stamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub template_id: String,
    pub template_revision: u64,
    pub batch_seed: u64,
    pub bindings: Vec<BindingSet>,
    pub run_ids: Vec<String>,
    pub submitted_ms: u64,
    /// Pacing each run starts with; 0 runs unpaced.
    #[serde(default)]
    pub speed_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subject", rename_all = "snake_case")]
pub enum LogEvent {
    Run {
        run_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<RunStatus>,
        to: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node_id: Option<String>,
        attempt: u32,
    },
    Node {
        node_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<NodeStatus>,
        to: NodeStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: LogEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControlError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("`{command}` is not allowed while the run is {state}")]
    IllegalTransition { command: &'static str, state: RunStatus },
    #[error("node `{0}` is not reachable")]
    NotRoutable(String),
    #[error("speed factor must be a finite number ≥ 0")]
    BadFactor,
}

/// Heartbeat timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Liveness {
    pub interval_ms: u64,
    /// Missed intervals before SUSPECT.
    pub suspect_after: u64,
    /// Missed intervals before DEAD.
    pub dead_after: u64,
}

impl Default for Liveness {
    fn default() -> Self {
        Self { interval_ms: 2000, suspect_after: 3, dead_after: 6 }
    }
}

/// A frame for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub node_id: String,
    pub message: Message,
}

/// Side effects of a mutation, drained by the owner after each call.
#[derive(Debug, Default)]
pub struct Effects {
    pub frames: Vec<Outgoing>,
    /// Runs whose persisted form changed.
    pub dirty_runs: BTreeSet<String>,
    pub nodes_changed: bool,
    /// `(run_id, attempt)` that reached COMPLETED.
    pub completed: Vec<(String, u32)>,
    /// `(run_id, attempt)` that ended otherwise.
    pub ended: Vec<(String, u32)>,
}

#[derive(Debug)]
pub struct Cluster {
    liveness: Liveness,
    nodes: BTreeMap<String, NodeInfo>,
    runs: BTreeMap<String, RunState>,
    batches: BTreeMap<String, Batch>,
    /// PENDING runs by submission seq.
    queue: BTreeMap<u64, String>,
    next_seq: u64,
    log: Vec<LogEntry>,
    fx: Effects,
}

fn active(state: RunStatus) -> bool {
    matches!(state, RunStatus::Assigned | RunStatus::Running | RunStatus::Paused)
}

impl Cluster {
    pub fn new(liveness: Liveness) -> Self {
        Self {
            liveness,
            nodes: BTreeMap::new(),
            runs: BTreeMap::new(),
            batches: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_seq: 0,
            log: Vec::new(),
            fx: Effects::default(),
        }
    }

    /// Rebuilds state persisted by a previous manager. Runs that were out on
    /// nodes are treated as lost with those nodes.
    pub fn restore(&mut self, batches: Vec<Batch>, mut runs: Vec<RunState>, now_ms: u64) {
        runs.sort_by_key(|r| r.seq);
        for b in batches {
            self.batches.insert(b.batch_id.clone(), b);
        }
        for r in runs {
            self.next_seq = self.next_seq.max(r.seq + 1);
            let id = r.run_id.clone();
            let state = r.state;
            self.runs.insert(id.clone(), r);
            if state == RunStatus::Pending {
                self.queue.insert(self.runs[&id].seq, id);
            } else if active(state) {
                self.release(&id, "manager restarted", now_ms);
            }
        }
    }

    pub fn take_effects(&mut self) -> Effects {
        std::mem::take(&mut self.fx)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeInfo> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&NodeInfo> {
        self.nodes.get(id)
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunState> {
        self.runs.values()
    }

    pub fn run(&self, id: &str) -> Option<&RunState> {
        self.runs.get(id)
    }

    pub fn batches(&self) -> impl Iterator<Item = &Batch> {
        self.batches.values()
    }

    pub fn batch(&self, id: &str) -> Option<&Batch> {
        self.batches.get(id)
    }

    /// Transition log entries with `seq >= since`.
    pub fn log_since(&self, since: u64) -> &[LogEntry] {
        let start = self.log.partition_point(|e| e.seq < since);
        &self.log[start..]
    }

    /// Count of the batch's runs per state; always sums to the run count.
    pub fn rollup(&self, batch: &Batch) -> BTreeMap<RunStatus, usize> {
        let mut counts: BTreeMap<RunStatus, usize> = RunStatus::ALL.iter().map(|s| (*s, 0)).collect();
        for id in &batch.run_ids {
            if let Some(r) = self.runs.get(id) {
                *counts.entry(r.state).or_default() += 1;
            }
        }
        counts
    }

    fn push_log(&mut self, at_ms: u64, event: LogEvent) {
        let seq = self.log.len() as u64;
        self.log.push(LogEntry { seq, at_ms, event });
    }

    fn set_run_state(
        &mut self,
        run_id: &str,
        to: RunStatus,
        node_id: Option<String>,
        detail: Option<String>,
        now_ms: u64,
    ) {
        let run = self.runs.get_mut(run_id).expect("known run");
        let from = run.state;
        if let Some(old) = run.node_id.as_ref().filter(|_| active(from)) {
            if let Some(n) = self.nodes.get_mut(old) {
                n.running.remove(run_id);
                self.fx.nodes_changed = true;
            }
        }
        run.state = to;
        run.node_id = node_id;
        run.detail = detail;
        run.transitions.push(Stamp { state: to, at_ms: now_ms });
        if active(to) {
            if let Some(n) = run.node_id.as_ref().and_then(|id| self.nodes.get_mut(id)) {
                n.running.insert(run_id.to_owned());
                self.fx.nodes_changed = true;
            }
        }
        if to == RunStatus::Pending {
            self.queue.insert(run.seq, run_id.to_owned());
        } else {
            self.queue.remove(&run.seq);
        }
        let event = LogEvent::Run {
            run_id: run_id.to_owned(),
            from: Some(from),
            to,
            node_id: run.node_id.clone(),
            attempt: run.attempts,
        };
        let attempt = run.attempts;
        self.fx.dirty_runs.insert(run_id.to_owned());
        match to {
            RunStatus::Completed => self.fx.completed.push((run_id.to_owned(), attempt)),
            RunStatus::Stopped | RunStatus::Failed if attempt > 0 => self.fx.ended.push((run_id.to_owned(), attempt)),
            _ => {}
        }
        self.push_log(now_ms, event);
    }

    fn set_node_status(&mut self, node_id: &str, to: NodeStatus, now_ms: u64) {
        let n = self.nodes.get_mut(node_id).expect("known node");
        let from = n.status;
        if from == to {
            return;
        }
        n.status = to;
        self.fx.nodes_changed = true;
        tracing::info!(node_id, ?from, ?to, "node status");
        self.push_log(now_ms, LogEvent::Node { node_id: node_id.to_owned(), from: Some(from), to });
    }

    /// Adds a batch and its PENDING runs, then schedules.
    pub fn submit(&mut self, batch: Batch, requests: Vec<ExecutionRequest>, now_ms: u64) {
        for req in requests {
            let seq = self.next_seq;
            self.next_seq += 1;
            let run_id = req.request_id.clone();
            let run = RunState {
                run_id: run_id.clone(),
                batch_id: batch.batch_id.clone(),
                index: req.origin.index,
                seq,
                request: req,
                state: RunStatus::Pending,
                node_id: None,
                attempts: 0,
                detail: None,
                transitions: vec![Stamp { state: RunStatus::Pending, at_ms: now_ms }],
            };
            self.runs.insert(run_id.clone(), run);
            self.queue.insert(seq, run_id.clone());
            self.fx.dirty_runs.insert(run_id.clone());
            self.push_log(
                now_ms,
                LogEvent::Run { run_id, from: None, to: RunStatus::Pending, node_id: None, attempt: 0 },
            );
        }
        self.batches.insert(batch.batch_id.clone(), batch);
        self.schedule(now_ms);
    }

    fn load(&self, node: &NodeInfo) -> usize {
        node.running.len()
    }

    /// Assigns PENDING runs in submission order, each to the live node with
    /// the fewest active runs (ties to the smaller node id), never beyond a
    /// node's capacity. Returns the assignments made.
    pub fn schedule(&mut self, now_ms: u64) -> Vec<(String, String)> {
        let mut made = Vec::new();
        while let Some((&_seq, run_id)) = self.queue.iter().next() {
            let run_id = run_id.clone();
            let target = self
                .nodes
                .values()
                .filter(|n| n.status == NodeStatus::Live && n.connected && !n.saturated)
                .filter(|n| self.load(n) < n.capacity as usize)
                .min_by(|a, b| self.load(a).cmp(&self.load(b)).then_with(|| a.node_id.cmp(&b.node_id)))
                .map(|n| n.node_id.clone());
            let Some(node_id) = target else { break };
            let run = self.runs.get_mut(&run_id).expect("queued run exists");
            run.attempts += 1;
            let request = run.request.clone();
            self.set_run_state(&run_id, RunStatus::Assigned, Some(node_id.clone()), None, now_ms);
            self.fx.frames.push(Outgoing {
                node_id: node_id.clone(),
                message: Message::Assign(Assign { execution_request: request }),
            });
            made.push((run_id, node_id));
        }
        made
    }

    /// Returns a run from a lost node to the queue, or fails it once the
    /// retry bound is reached.
    fn release(&mut self, run_id: &str, reason: &str, now_ms: u64) {
        let attempts = self.runs[run_id].attempts;
        if attempts < MAX_ATTEMPTS {
            self.set_run_state(run_id, RunStatus::Pending, None, Some(format!("retrying: {reason}")), now_ms);
        } else {
            let node = self.runs[run_id].node_id.clone();
            self.set_run_state(run_id, RunStatus::Failed, node, Some(reason.to_owned()), now_ms);
        }
    }

    pub fn hello(&mut self, node_id: &str, address: &str, capacity: u32, now_ms: u64) {
        let previous = self.nodes.get(node_id).map(|n| n.status);
        let node = self.nodes.entry(node_id.to_owned()).or_insert_with(|| NodeInfo {
            node_id: node_id.to_owned(),
            address: String::new(),
            capacity,
            running: BTreeSet::new(),
            last_heartbeat_ms: now_ms,
            status: NodeStatus::Live,
            connected: true,
            saturated: false,
        });
        node.address = address.to_owned();
        node.capacity = capacity;
        node.connected = true;
        node.last_heartbeat_ms = now_ms;
        node.saturated = false;
        self.fx.nodes_changed = true;
        match previous {
            None => {
                self.push_log(now_ms, LogEvent::Node { node_id: node_id.to_owned(), from: None, to: NodeStatus::Live })
            }
            Some(_) => self.set_node_status(node_id, NodeStatus::Live, now_ms),
        }
        self.schedule(now_ms);
    }

    /// Any frame from a node proves it alive. Heartbeats can queue behind
    /// large record batches, so they alone would understate liveness.
    pub fn seen(&mut self, node_id: &str, now_ms: u64) {
        let Some(node) = self.nodes.get_mut(node_id) else { return };
        node.last_heartbeat_ms = now_ms;
        if node.status != NodeStatus::Live {
            self.set_node_status(node_id, NodeStatus::Live, now_ms);
            self.schedule(now_ms);
        }
    }

    /// Refreshes liveness and reconciles the node's view of its runs with ours.
    pub fn heartbeat(&mut self, node_id: &str, running: &[String], now_ms: u64) {
        let Some(node) = self.nodes.get_mut(node_id) else { return };
        node.last_heartbeat_ms = now_ms;
        node.saturated = false;
        self.set_node_status(node_id, NodeStatus::Live, now_ms);
        let reported: BTreeSet<&str> = running.iter().map(String::as_str).collect();
        // Started runs the node no longer holds were lost (for example its
        // final report never arrived). ASSIGNED ones may still be in flight.
        let lost: Vec<String> = self.nodes[node_id]
            .running
            .iter()
            .filter(|id| !reported.contains(id.as_str()))
            .filter(|id| matches!(self.runs[id.as_str()].state, RunStatus::Running | RunStatus::Paused))
            .cloned()
            .collect();
        for id in lost {
            tracing::warn!(run_id = %id, node_id, "node no longer reports run");
            self.release(&id, "run vanished from node", now_ms);
        }
        for id in reported {
            let ours = self.runs.get(id).is_some_and(|r| active(r.state) && r.node_id.as_deref() == Some(node_id));
            if !ours {
                self.fx.frames.push(not_assigned(node_id, id));
            }
        }
        self.schedule(now_ms);
    }

    pub fn disconnected(&mut self, node_id: &str) {
        if let Some(n) = self.nodes.get_mut(node_id) {
            n.connected = false;
            self.fx.nodes_changed = true;
        }
    }

    /// Graceful departure: the node's runs are rescheduled at once.
    pub fn bye(&mut self, node_id: &str, now_ms: u64) {
        if self.nodes.contains_key(node_id) {
            self.disconnected(node_id);
            self.set_node_status(node_id, NodeStatus::Dead, now_ms);
            self.on_node_dead(node_id, now_ms);
            self.schedule(now_ms);
        }
    }

    /// Advances heartbeat timeouts.
    pub fn tick(&mut self, now_ms: u64) {
        let l = self.liveness;
        let changes: Vec<(String, NodeStatus)> = self
            .nodes
            .values()
            .filter(|n| n.status != NodeStatus::Dead)
            .filter_map(|n| {
                let silent = now_ms.saturating_sub(n.last_heartbeat_ms);
                if silent >= l.interval_ms * l.dead_after {
                    Some((n.node_id.clone(), NodeStatus::Dead))
                } else if silent >= l.interval_ms * l.suspect_after && n.status == NodeStatus::Live {
                    Some((n.node_id.clone(), NodeStatus::Suspect))
                } else {
                    None
                }
            })
            .collect();
        for (id, to) in changes {
            self.set_node_status(&id, to, now_ms);
            if to == NodeStatus::Dead {
                self.on_node_dead(&id, now_ms);
            }
        }
        self.schedule(now_ms);
    }

    /// Requeues (or fails, past the retry bound) every run the node held.
    pub fn on_node_dead(&mut self, node_id: &str, now_ms: u64) {
        let held: Vec<String> =
            self.nodes.get(node_id).map(|n| n.running.iter().cloned().collect()).unwrap_or_default();
        for id in held {
            self.release(&id, "node lost", now_ms);
        }
    }

    pub fn assign_ack(&mut self, node_id: &str, run_id: &str, accepted: bool, reason: Option<&str>, now_ms: u64) {
        let ours = self
            .runs
            .get(run_id)
            .is_some_and(|r| r.state == RunStatus::Assigned && r.node_id.as_deref() == Some(node_id));
        if !ours {
            return;
        }
        if accepted {
            let factor =
                self.runs.get(run_id).and_then(|r| self.batches.get(&r.batch_id)).map_or(0.0, |b| b.speed_factor);
            if factor > 0.0 {
                self.fx.frames.push(Outgoing {
                    node_id: node_id.to_owned(),
                    message: Message::Control(Control {
                        run_id: run_id.to_owned(),
                        command: ControlCommand::SetSpeed { factor },
                    }),
                });
            }
            self.fx.frames.push(Outgoing {
                node_id: node_id.to_owned(),
                message: Message::Control(Control { run_id: run_id.to_owned(), command: ControlCommand::Play }),
            });
            return;
        }
        tracing::info!(run_id, node_id, ?reason, "assignment refused");
        if reason == Some("capacity") {
            if let Some(n) = self.nodes.get_mut(node_id) {
                n.saturated = true;
            }
        }
        self.runs.get_mut(run_id).expect("checked").attempts -= 1;
        self.set_run_state(run_id, RunStatus::Pending, None, reason.map(str::to_owned), now_ms);
        self.schedule(now_ms);
    }

    /// A state report from the node running `run_id`.
    pub fn state_change(&mut self, node_id: &str, run_id: &str, state: RunStatus, detail: Option<String>, now_ms: u64) {
        let Some(run) = self.runs.get(run_id) else {
            self.fx.frames.push(not_assigned(node_id, run_id));
            return;
        };
        if !(active(run.state) && run.node_id.as_deref() == Some(node_id)) {
            if !state.is_terminal() {
                self.fx.frames.push(not_assigned(node_id, run_id));
            }
            return;
        }
        let reportable = matches!(
            state,
            RunStatus::Running | RunStatus::Paused | RunStatus::Completed | RunStatus::Stopped | RunStatus::Failed
        );
        if !reportable || run.state == state {
            return;
        }
        self.set_run_state(run_id, state, Some(node_id.to_owned()), detail, now_ms);
        if state.is_terminal() {
            self.schedule(now_ms);
        }
    }

    /// Ends a run whose records could not be stored.
    pub fn fail(&mut self, run_id: &str, reason: String, now_ms: u64) {
        let Some(run) = self.runs.get(run_id) else { return };
        if run.state.is_terminal() {
            return;
        }
        let node = run.node_id.clone();
        if let Some(n) = node.as_deref().filter(|_| active(run.state)) {
            self.fx.frames.push(Outgoing {
                node_id: n.to_owned(),
                message: Message::Control(Control { run_id: run_id.to_owned(), command: ControlCommand::Stop }),
            });
        }
        self.set_run_state(run_id, RunStatus::Failed, node, Some(reason), now_ms);
        self.schedule(now_ms);
    }

    /// The attempt under which records from `node_id` for `run_id` are stored,
    /// or `None` if that node does not own the run.
    pub fn record_attempt(&self, node_id: &str, run_id: &str) -> Option<u32> {
        self.runs.get(run_id).filter(|r| active(r.state) && r.node_id.as_deref() == Some(node_id)).map(|r| r.attempts)
    }

    /// Validates a control command against our view and forwards it.
    pub fn control(&mut self, run_id: &str, command: ControlCommand, now_ms: u64) -> Result<(), ControlError> {
        let run = self.runs.get(run_id).ok_or_else(|| ControlError::UnknownRun(run_id.to_owned()))?;
        let illegal = ControlError::IllegalTransition { command: command.name(), state: run.state };
        if let ControlCommand::SetSpeed { factor } = command {
            if !(factor.is_finite() && factor >= 0.0) {
                return Err(ControlError::BadFactor);
            }
        }
        match run.state {
            RunStatus::Pending => {
                if command != ControlCommand::Stop {
                    return Err(illegal);
                }
                self.set_run_state(run_id, RunStatus::Stopped, None, Some("stopped before execution".into()), now_ms);
                Ok(())
            }
            s if s.is_terminal() => Err(illegal),
            state => {
                let allowed = match command {
                    ControlCommand::Play => state == RunStatus::Assigned,
                    ControlCommand::Pause => matches!(state, RunStatus::Assigned | RunStatus::Running),
                    ControlCommand::Resume => state == RunStatus::Paused,
                    ControlCommand::Stop | ControlCommand::SetSpeed { .. } | ControlCommand::SetParam(_) => true,
                };
                if !allowed {
                    return Err(illegal);
                }
                let node_id = run.node_id.clone().expect("active runs have a node");
                let reachable = self.nodes.get(&node_id).is_some_and(|n| n.status == NodeStatus::Live && n.connected);
                if !reachable {
                    return Err(ControlError::NotRoutable(node_id));
                }
                self.fx.frames.push(Outgoing {
                    node_id,
                    message: Message::Control(Control { run_id: run_id.to_owned(), command }),
                });
                Ok(())
            }
        }
    }
}

fn not_assigned(node_id: &str, run_id: &str) -> Outgoing {
    Outgoing {
        node_id: node_id.to_owned(),
        message: Message::Error(ErrorMsg { code: error_code::RUN_NOT_ASSIGNED.into(), text: run_id.to_owned() }),
    }
}

/// Replays the run events of a transition log and returns the largest number
/// of runs simultaneously ASSIGNED or RUNNING, plus each run's final state.
pub fn replay_log(log: &[LogEntry]) -> (usize, BTreeMap<String, RunStatus>) {
    let mut states = BTreeMap::new();
    let mut peak = 0;
    for e in log {
        if let LogEvent::Run { run_id, to, .. } = &e.event {
            states.insert(run_id.clone(), *to);
            let busy = states.values().filter(|s| matches!(s, RunStatus::Assigned | RunStatus::Running)).count();
            peak = peak.max(busy);
        }
    }
    (peak, states)
}
