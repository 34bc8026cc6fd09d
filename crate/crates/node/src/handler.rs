//! The node daemon: manager link, heartbeats, run slots and the outbox of
//! record batches awaiting acknowledgment.

use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::path::PathBuf;
use std::sync::{mpsc, Arc};
use std::time::Duration;

use asa_core::engine::{ModelRegistry, RunOutcome};
use asa_core::protocol::{
    self, error_code, AssignAck, Bye, DecodeError, ErrorMsg, FrameReader, Heartbeat, Hello, Message, RecordBatch,
    RunStateChange, RunStatus,
};
use asa_core::scenario::ExecutionRequest;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use tokio::time::{Instant, MissedTickBehavior};

use crate::execution::{execute, Inbound, Phase, RunEvent};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node_id: String,
    /// `host:port` of the manager's node listener.
    pub manager_addr: String,
    /// Maximum concurrent runs.
    pub capacity: u32,
    pub heartbeat_interval: Duration,
    pub extension_dirs: Vec<PathBuf>,
    /// Steps per record batch.
    pub flush_every: u64,
    /// Unacknowledged record bytes at which runs hold themselves.
    pub buffer_limit: usize,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>, manager_addr: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            manager_addr: manager_addr.into(),
            capacity: 1,
            heartbeat_interval: Duration::from_secs(2),
            extension_dirs: Vec::new(),
            flush_every: 50,
            buffer_limit: 64 * 1024 * 1024,
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.capacity < 1 {
            return Err(ConfigError::Capacity);
        }
        if self.heartbeat_interval.is_zero() {
            return Err(ConfigError::Heartbeat);
        }
        if self.node_id.is_empty() {
            return Err(ConfigError::NodeId);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("capacity must be at least 1")]
    Capacity,
    #[error("heartbeat interval must be positive")]
    Heartbeat,
    #[error("node id must not be empty")]
    NodeId,
}

/// Exponential reconnect delay.
#[derive(Debug, Clone)]
pub struct Backoff {
    initial: Duration,
    max: Duration,
    next: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Self {
        Self { initial, max, next: initial }
    }

    /// The delay to use now; the following one doubles, up to the cap.
    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(self.max);
        d
    }

    pub fn reset(&mut self) {
        self.next = self.initial;
    }
}

/// How the daemon leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shutdown {
    /// Say Bye first.
    Graceful,
    /// Drop the link and every run without a word, as a crash would.
    Abrupt,
}

struct Unacked {
    last_step: u64,
    frame: Vec<u8>,
}

struct Slot {
    generation: u64,
    inbound: mpsc::Sender<Inbound>,
    status: Option<RunStatus>,
    outbox: VecDeque<Unacked>,
    /// Final state, sent once every record batch is acknowledged.
    terminal: Option<RunStateChange>,
}

type EventSender = UnboundedSender<(String, u64, RunEvent)>;

/// Handler state. Methods push outgoing frames onto `out`; the caller sends
/// them if the link is up. Anything that must survive a disconnect lives in
/// the slots and is replayed by [`Node::resync`].
struct Node {
    config: NodeConfig,
    registry: Arc<ModelRegistry>,
    events: EventSender,
    slots: BTreeMap<String, Slot>,
    generation: u64,
    unacked_bytes: usize,
    holding: bool,
}

impl Node {
    fn hello(&self) -> Vec<u8> {
        protocol::encode(&Message::Hello(Hello {
            node_id: self.config.node_id.clone(),
            capacity: self.config.capacity,
        }))
    }

    fn heartbeat(&self) -> Vec<u8> {
        protocol::encode(&Message::Heartbeat(Heartbeat {
            node_id: self.config.node_id.clone(),
            running_run_ids: self.slots.keys().cloned().collect(),
        }))
    }

    /// Everything a freshly connected manager needs: identity, current run
    /// states, unacknowledged records and any final states they were holding.
    fn resync(&mut self) -> Vec<Vec<u8>> {
        let mut out = vec![self.hello(), self.heartbeat()];
        for (run_id, slot) in &self.slots {
            if let Some(state) = slot.status {
                out.push(state_change(run_id, state, None));
            }
            out.extend(slot.outbox.iter().map(|u| u.frame.clone()));
        }
        let ids: Vec<String> = self.slots.keys().cloned().collect();
        for id in ids {
            self.try_finalize(&id, true, &mut out);
        }
        out
    }

    fn on_message(&mut self, msg: Message, connected: bool, out: &mut Vec<Vec<u8>>) {
        match msg {
            Message::Assign(a) => self.assign(a.execution_request, out),
            Message::Control(c) => match self.slots.get(&c.run_id) {
                Some(slot) => {
                    let _ = slot.inbound.send(Inbound::Control(c.command));
                }
                None => {
                    out.push(error(error_code::ILLEGAL_TRANSITION, format!("run `{}` is not on this node", c.run_id)))
                }
            },
            Message::RecordAck(a) => {
                if let Some(through) = a.through_step {
                    self.ack(&a.run_id, through, connected, out);
                }
            }
            Message::Error(e) if e.code == error_code::RUN_NOT_ASSIGNED => {
                if self.abandon(&e.text) {
                    tracing::warn!(run_id = %e.text, "manager reassigned run, abandoning local execution");
                }
            }
            Message::Error(e) => tracing::warn!(code = %e.code, text = %e.text, "manager reported error"),
            other => tracing::warn!(msg_type = other.msg_type(), "unexpected message from manager"),
        }
    }

    fn assign(&mut self, request: ExecutionRequest, out: &mut Vec<Vec<u8>>) {
        let run_id = request.request_id.clone();
        // A reassignment of a run still held here supersedes the old execution.
        self.abandon(&run_id);
        if self.slots.len() >= self.config.capacity as usize {
            out.push(protocol::encode(&Message::AssignAck(AssignAck {
                run_id,
                accepted: false,
                reason: Some("capacity".into()),
            })));
            return;
        }
        self.generation += 1;
        let generation = self.generation;
        let (tx, rx) = mpsc::channel();
        if self.holding {
            let _ = tx.send(Inbound::Hold(true));
        }
        let events = self.events.clone();
        let registry = self.registry.clone();
        let flush_every = self.config.flush_every.max(1);
        let id = run_id.clone();
        let spawned = std::thread::Builder::new().name(format!("run-{run_id}")).spawn(move || {
            let mut emit = |ev| events.send((id.clone(), generation, ev)).is_ok();
            execute(&request, &registry, &rx, flush_every, &mut emit);
        });
        if let Err(e) = spawned {
            out.push(protocol::encode(&Message::AssignAck(AssignAck {
                run_id,
                accepted: false,
                reason: Some(format!("spawn failed: {e}")),
            })));
            return;
        }
        self.slots.insert(
            run_id.clone(),
            Slot { generation, inbound: tx, status: None, outbox: VecDeque::new(), terminal: None },
        );
        tracing::info!(%run_id, "run accepted");
        out.push(protocol::encode(&Message::AssignAck(AssignAck { run_id, accepted: true, reason: None })));
    }

    fn on_event(&mut self, run_id: String, generation: u64, event: RunEvent, connected: bool, out: &mut Vec<Vec<u8>>) {
        let Some(slot) = self.slots.get_mut(&run_id).filter(|s| s.generation == generation) else {
            return;
        };
        match event {
            RunEvent::Phase(phase) => {
                let state = match phase {
                    Phase::Running => RunStatus::Running,
                    Phase::Paused => RunStatus::Paused,
                    _ => return,
                };
                slot.status = Some(state);
                out.push(state_change(&run_id, state, None));
            }
            RunEvent::Records(records) => {
                let Some(last) = records.last() else { return };
                let last_step = last.step;
                let frame = protocol::encode(&Message::RecordBatch(RecordBatch { run_id: run_id.clone(), records }));
                self.unacked_bytes += frame.len();
                if connected {
                    out.push(frame.clone());
                }
                slot.outbox.push_back(Unacked { last_step, frame });
                self.check_hold();
            }
            RunEvent::Rejected(e) => {
                out.push(error(error_code::ILLEGAL_TRANSITION, format!("run `{run_id}`: {e}")));
            }
            RunEvent::Finished(outcome) => {
                let (state, detail) = match outcome {
                    RunOutcome::Completed { .. } => (RunStatus::Completed, None),
                    RunOutcome::Stopped { step } => (RunStatus::Stopped, Some(format!("stopped at step {step}"))),
                    RunOutcome::Failed { reason } => (RunStatus::Failed, Some(reason)),
                };
                tracing::info!(%run_id, %state, "run finished");
                slot.terminal = Some(RunStateChange { run_id: run_id.clone(), state, detail });
                self.try_finalize(&run_id, connected, out);
            }
        }
    }

    fn ack(&mut self, run_id: &str, through: u64, connected: bool, out: &mut Vec<Vec<u8>>) {
        let Some(slot) = self.slots.get_mut(run_id) else { return };
        while slot.outbox.front().is_some_and(|u| u.last_step <= through) {
            let u = slot.outbox.pop_front().expect("checked");
            self.unacked_bytes -= u.frame.len();
        }
        self.check_hold();
        self.try_finalize(run_id, connected, out);
    }

    /// Sends the final state and frees the slot once nothing is outstanding.
    fn try_finalize(&mut self, run_id: &str, connected: bool, out: &mut Vec<Vec<u8>>) {
        let ready = self.slots.get(run_id).is_some_and(|s| s.terminal.is_some() && s.outbox.is_empty());
        if ready && connected {
            let slot = self.slots.remove(run_id).expect("checked");
            out.push(protocol::encode(&Message::RunStateChange(slot.terminal.expect("checked"))));
        }
    }

    /// Drops a run and its unacknowledged records. Its thread exits at the
    /// next boundary when it finds the inbound queue closed.
    fn abandon(&mut self, run_id: &str) -> bool {
        let Some(slot) = self.slots.remove(run_id) else { return false };
        self.unacked_bytes -= slot.outbox.iter().map(|u| u.frame.len()).sum::<usize>();
        self.check_hold();
        true
    }

    /// Holds every run while unacknowledged data exceeds the limit and
    /// releases them once it drains below half.
    fn check_hold(&mut self) {
        let hold = if self.holding {
            self.unacked_bytes > self.config.buffer_limit / 2
        } else {
            self.unacked_bytes > self.config.buffer_limit
        };
        if hold != self.holding {
            self.holding = hold;
            tracing::info!(unacked_bytes = self.unacked_bytes, hold, "record buffer threshold crossed");
            for slot in self.slots.values() {
                let _ = slot.inbound.send(Inbound::Hold(hold));
            }
        }
    }
}

fn state_change(run_id: &str, state: RunStatus, detail: Option<String>) -> Vec<u8> {
    protocol::encode(&Message::RunStateChange(RunStateChange { run_id: run_id.to_owned(), state, detail }))
}

fn error(code: &str, text: String) -> Vec<u8> {
    protocol::encode(&Message::Error(ErrorMsg { code: code.to_owned(), text }))
}

enum Wire {
    Frame(u64, Result<Message, DecodeError>),
    Closed(u64),
}

async fn read_frames(mut reader: OwnedReadHalf, link: u64, tx: UnboundedSender<Wire>) {
    let mut frames = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match reader.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                for m in frames.feed(&buf[..n]) {
                    if tx.send(Wire::Frame(link, m)).is_err() {
                        return;
                    }
                }
            }
        }
    }
    let _ = tx.send(Wire::Closed(link));
}

struct Link {
    id: u64,
    writer: OwnedWriteHalf,
}

async fn send_all(link: &mut Link, frames: &[Vec<u8>]) -> std::io::Result<()> {
    for f in frames {
        link.writer.write_all(f).await?;
    }
    Ok(())
}

/// Runs the daemon until `shutdown` resolves.
///
/// Connects to the manager (retrying with exponential backoff), announces
/// itself, heartbeats, and executes assigned runs on their own threads.
/// Runs keep executing while the link is down; their records wait in the
/// outbox and are retransmitted after reconnecting.
pub async fn run_node(
    config: NodeConfig,
    registry: Arc<ModelRegistry>,
    shutdown: impl Future<Output = Shutdown>,
) -> Result<(), ConfigError> {
    config.validate()?;
    let (events_tx, mut events_rx) = unbounded_channel();
    let (wire_tx, mut wire_rx) = unbounded_channel();
    let mut backoff = Backoff::new(config.backoff_initial, config.backoff_max);
    let mut heartbeat = tokio::time::interval(config.heartbeat_interval);
    heartbeat.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut node = Node {
        config,
        registry,
        events: events_tx,
        slots: BTreeMap::new(),
        generation: 0,
        unacked_bytes: 0,
        holding: false,
    };
    let mut link: Option<Link> = None;
    let mut link_ids = 0u64;
    let mut reconnect_at = Instant::now();
    tokio::pin!(shutdown);

    loop {
        if link.is_none() && Instant::now() >= reconnect_at {
            let addr = node.config.manager_addr.clone();
            match tokio::time::timeout(Duration::from_secs(5), TcpStream::connect(&addr)).await {
                Ok(Ok(stream)) => {
                    let _ = stream.set_nodelay(true);
                    let (reader, writer) = stream.into_split();
                    link_ids += 1;
                    tokio::spawn(read_frames(reader, link_ids, wire_tx.clone()));
                    let mut l = Link { id: link_ids, writer };
                    let frames = node.resync();
                    if send_all(&mut l, &frames).await.is_ok() {
                        tracing::info!(%addr, "connected to manager");
                        backoff.reset();
                        link = Some(l);
                    } else {
                        reconnect_at = Instant::now() + backoff.next_delay();
                    }
                }
                Ok(Err(e)) => {
                    let delay = backoff.next_delay();
                    tracing::warn!(%addr, error = %e, ?delay, "manager unreachable");
                    reconnect_at = Instant::now() + delay;
                }
                Err(_) => {
                    let delay = backoff.next_delay();
                    tracing::warn!(%addr, ?delay, "connect timed out");
                    reconnect_at = Instant::now() + delay;
                }
            }
        }

        let mut out = Vec::new();
        let connected = link.is_some();
        tokio::select! {
            mode = &mut shutdown => {
                if let (Shutdown::Graceful, Some(l)) = (mode, link.as_mut()) {
                    let bye = protocol::encode(&Message::Bye(Bye { node_id: node.config.node_id.clone() }));
                    let _ = send_all(l, &[bye]).await;
                    let _ = l.writer.shutdown().await;
                }
                return Ok(());
            }
            Some((run_id, generation, event)) = events_rx.recv() => {
                node.on_event(run_id, generation, event, connected, &mut out);
            }
            Some(wire) = wire_rx.recv() => match wire {
                Wire::Frame(id, msg) if link.as_ref().is_some_and(|l| l.id == id) => match msg {
                    Ok(msg) => node.on_message(msg, connected, &mut out),
                    Err(e) => tracing::warn!(error = %e, "undecodable frame from manager"),
                },
                Wire::Closed(id) if link.as_ref().is_some_and(|l| l.id == id) => {
                    let delay = backoff.next_delay();
                    tracing::warn!(?delay, "manager link lost");
                    link = None;
                    reconnect_at = Instant::now() + delay;
                }
                _ => {}
            },
            _ = heartbeat.tick(), if connected => out.push(node.heartbeat()),
            _ = tokio::time::sleep_until(reconnect_at), if !connected => {}
        }

        if let Some(l) = link.as_mut() {
            if !out.is_empty() && send_all(l, &out).await.is_err() {
                let delay = backoff.next_delay();
                tracing::warn!(?delay, "write to manager failed");
                link = None;
                reconnect_at = Instant::now() + delay;
            }
        }
    }
}

/// A node daemon on its own thread and runtime, for embedding in tests and
/// single-process deployments.
pub struct NodeDaemon {
    stop: Option<tokio::sync::oneshot::Sender<Shutdown>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl NodeDaemon {
    pub fn start(config: NodeConfig, registry: Arc<ModelRegistry>) -> Result<Self, ConfigError> {
        config.validate()?;
        let (stop, stopped) = tokio::sync::oneshot::channel();
        let name = format!("node-{}", config.node_id);
        let thread = std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
                let wait = async { stopped.await.unwrap_or(Shutdown::Abrupt) };
                if let Err(e) = rt.block_on(run_node(config, registry, wait)) {
                    tracing::error!(error = %e, "node exited");
                }
            })
            .expect("spawn node thread");
        Ok(Self { stop: Some(stop), thread: Some(thread) })
    }

    /// Vanishes without a Bye and abandons every run.
    pub fn kill(mut self) {
        self.finish(Shutdown::Abrupt);
    }

    pub fn shutdown(mut self) {
        self.finish(Shutdown::Graceful);
    }

    fn finish(&mut self, mode: Shutdown) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(mode);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for NodeDaemon {
    fn drop(&mut self) {
        self.finish(Shutdown::Abrupt);
    }
}
