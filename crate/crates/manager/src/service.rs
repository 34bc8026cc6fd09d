//! The manager process state: cluster, datastore, node links and the event bus.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use asa_core::datastore::{Datastore, Kind, StoreError};
use asa_core::engine::ModelRegistry;
use asa_core::protocol::{self, error_code, ErrorMsg, Message, RecordAck, RecordBatch, RunStatus};
use asa_core::scenario::ExecutionRequest;
use asa_core::StepRecord;
use serde::Serialize;
use tokio::sync::{broadcast, mpsc};

use crate::cluster::{Batch, Cluster, Liveness, NodeInfo, RunState, Stamp};

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Record tags carried by the live stream.
pub const STREAM_TAGS: [&str; 4] = ["status", "launch", "hit", "miss"];

/// What API clients see of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunView {
    pub run_id: String,
    pub batch_id: String,
    pub index: u64,
    pub state: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub seed: u64,
    pub max_steps: u64,
    pub step_dt: f64,
    /// Highest step persisted for the current attempt.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub progress_step: Option<u64>,
    pub transitions: Vec<Stamp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request: Option<ExecutionRequest>,
}

impl RunView {
    fn of(run: &RunState, progress: Option<u64>, full: bool) -> Self {
        Self {
            run_id: run.run_id.clone(),
            batch_id: run.batch_id.clone(),
            index: run.index,
            state: run.state,
            node_id: run.node_id.clone(),
            attempts: run.attempts,
            detail: run.detail.clone(),
            seed: run.request.seed,
            max_steps: run.request.scenario.sim.max_steps,
            step_dt: run.request.scenario.sim.step_dt,
            progress_step: progress,
            transitions: run.transitions.clone(),
            request: full.then(|| run.request.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchView {
    #[serde(flatten)]
    pub batch: Batch,
    pub rollup: BTreeMap<RunStatus, usize>,
    /// Every run is in a terminal state.
    pub complete: bool,
}

/// Notifications fanned out to stream subscribers.
#[derive(Debug, Clone)]
pub enum BusEvent {
    Run(Arc<RunView>),
    Nodes(Arc<Vec<NodeInfo>>),
    /// Freshly persisted records with a stream tag.
    Records {
        run_id: Arc<str>,
        attempt: u32,
        records: Arc<Vec<StepRecord>>,
    },
    /// A node refused a control command.
    Rejected {
        text: Arc<str>,
    },
}

struct Link {
    conn_id: u64,
    tx: mpsc::UnboundedSender<Vec<u8>>,
}

struct Inner {
    cluster: Cluster,
    links: BTreeMap<String, Link>,
    progress: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub data_dir: PathBuf,
    pub extension_dirs: Vec<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub liveness: Liveness,
}

impl ManagerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), extension_dirs: Vec::new(), ui_dir: None, liveness: Liveness::default() }
    }
}

pub struct Manager {
    pub store: Datastore,
    pub registry: ModelRegistry,
    pub config: ManagerConfig,
    inner: Mutex<Inner>,
    bus: broadcast::Sender<BusEvent>,
    conn_ids: AtomicU64,
}

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Extensions(#[from] asa_core::engine::LoadError),
    #[error("stored {kind} `{id}` is unreadable: {reason}")]
    Unreadable { kind: Kind, id: String, reason: String },
}

impl Manager {
    /// Opens the datastore, loads extensions and restores persisted batches
    /// and runs.
    pub fn open(config: ManagerConfig) -> Result<Arc<Self>, OpenError> {
        let store = Datastore::open(&config.data_dir)?;
        let registry = asa_core::engine::registry::load_registry(&config.extension_dirs)?;
        let mut cluster = Cluster::new(config.liveness);
        let batches = load_all::<Batch>(&store, Kind::Batch)?;
        let runs = load_all::<RunState>(&store, Kind::Run)?;
        cluster.restore(batches, runs, now_ms());
        let (bus, _) = broadcast::channel(4096);
        let manager = Arc::new(Self {
            store,
            registry,
            config,
            inner: Mutex::new(Inner { cluster, links: BTreeMap::new(), progress: BTreeMap::new() }),
            bus,
            conn_ids: AtomicU64::new(0),
        });
        // Persist whatever the restore changed.
        manager.with_cluster(|_, _| ());
        Ok(manager)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<BusEvent> {
        self.bus.subscribe()
    }

    pub fn next_conn_id(&self) -> u64 {
        self.conn_ids.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Applies one mutation under the manager lock, then carries out its
    /// effects in order: frames to nodes, write-through persistence, log
    /// bookkeeping and notifications.
    pub fn with_cluster<R>(&self, f: impl FnOnce(&mut Cluster, u64) -> R) -> R {
        let mut inner = self.lock();
        let out = f(&mut inner.cluster, now_ms());
        let fx = inner.cluster.take_effects();
        for o in fx.frames {
            if let Some(link) = inner.links.get(&o.node_id) {
                let _ = link.tx.send(protocol::encode(&o.message));
            }
        }
        for (run_id, attempt) in &fx.completed {
            if let Err(e) = self.store.records.mark_completed(run_id, *attempt) {
                tracing::error!(%run_id, error = %e, "could not mark attempt completed");
            }
        }
        for (run_id, attempt) in &fx.ended {
            self.store.records.close(run_id, *attempt);
        }
        for run_id in &fx.dirty_runs {
            let run = inner.cluster.run(run_id).expect("dirty run exists");
            let body = serde_json::to_value(run).expect("run state serializes");
            if let Err(e) = self.store.catalog.put(Kind::Run, run_id, body, None) {
                tracing::error!(%run_id, error = %e, "could not persist run");
            }
            let view = RunView::of(run, inner.progress.get(run_id).copied(), false);
            let _ = self.bus.send(BusEvent::Run(Arc::new(view)));
        }
        if fx.nodes_changed {
            let nodes: Vec<NodeInfo> = inner.cluster.nodes().cloned().collect();
            let _ = self.bus.send(BusEvent::Nodes(Arc::new(nodes)));
        }
        out
    }

    /// Read-only access under the lock.
    pub fn read<R>(&self, f: impl FnOnce(&Cluster) -> R) -> R {
        f(&self.lock().cluster)
    }

    pub fn run_view(&self, run_id: &str, full: bool) -> Option<RunView> {
        let inner = self.lock();
        let run = inner.cluster.run(run_id)?;
        Some(RunView::of(run, inner.progress.get(run_id).copied(), full))
    }

    pub fn run_views(&self, filter: impl Fn(&RunState) -> bool) -> Vec<RunView> {
        let inner = self.lock();
        let mut runs: Vec<&RunState> = inner.cluster.runs().filter(|r| filter(r)).collect();
        runs.sort_by_key(|r| r.seq);
        runs.into_iter().map(|r| RunView::of(r, inner.progress.get(&r.run_id).copied(), false)).collect()
    }

    pub fn batch_view(&self, batch_id: &str) -> Option<BatchView> {
        self.read(|c| c.batch(batch_id).map(|b| batch_view(c, b)))
    }

    pub fn batch_views(&self) -> Vec<BatchView> {
        self.read(|c| {
            let mut all: Vec<BatchView> = c.batches().map(|b| batch_view(c, b)).collect();
            all.sort_by(|a, b| {
                (a.batch.submitted_ms, &a.batch.batch_id).cmp(&(b.batch.submitted_ms, &b.batch.batch_id))
            });
            all
        })
    }

    /// Persists and enqueues a new batch.
    pub fn submit(&self, batch: Batch, requests: Vec<ExecutionRequest>) -> Result<BatchView, StoreError> {
        let body = serde_json::to_value(&batch).expect("batch serializes");
        self.store.catalog.create(Kind::Batch, &batch.batch_id, body)?;
        let id = batch.batch_id.clone();
        self.with_cluster(|c, now| c.submit(batch, requests, now));
        Ok(self.batch_view(&id).expect("just submitted"))
    }

    pub fn register_link(&self, node_id: &str, conn_id: u64, tx: mpsc::UnboundedSender<Vec<u8>>) {
        self.lock().links.insert(node_id.to_owned(), Link { conn_id, tx });
    }

    /// Forgets a connection unless a newer one for the node replaced it.
    pub fn unregister_link(&self, node_id: &str, conn_id: u64) {
        let current = {
            let mut inner = self.lock();
            let current = inner.links.get(node_id).is_some_and(|l| l.conn_id == conn_id);
            if current {
                inner.links.remove(node_id);
            }
            current
        };
        if current {
            self.with_cluster(|c, _| c.disconnected(node_id));
        }
    }

    /// Stores a record batch from `node_id` and produces the reply.
    pub fn ingest(&self, node_id: &str, batch: RecordBatch) -> Message {
        let run_id = batch.run_id;
        let Some(attempt) = self.read(|c| c.record_attempt(node_id, &run_id)) else {
            return Message::Error(ErrorMsg { code: error_code::RUN_NOT_ASSIGNED.into(), text: run_id });
        };
        match self.store.records.append(&run_id, attempt, &batch.records) {
            Ok(through) => {
                if let Some(t) = through {
                    self.lock().progress.insert(run_id.clone(), t);
                }
                let streamed: Vec<StepRecord> =
                    batch.records.into_iter().filter(|r| STREAM_TAGS.contains(&r.tag.as_str())).collect();
                if !streamed.is_empty() {
                    let _ = self.bus.send(BusEvent::Records {
                        run_id: run_id.as_str().into(),
                        attempt,
                        records: Arc::new(streamed),
                    });
                }
                Message::RecordAck(RecordAck { run_id, through_step: through })
            }
            Err(e) => {
                tracing::error!(%run_id, attempt, error = %e, "record ingest failed");
                if matches!(e, StoreError::CorruptLog { .. }) {
                    match self.store.records.quarantine(&run_id, attempt) {
                        Ok(to) => tracing::warn!(%run_id, path = %to.display(), "quarantined corrupt log"),
                        Err(q) => tracing::error!(%run_id, error = %q, "quarantine failed"),
                    }
                    let reason = format!("corrupt record log: {e}");
                    self.with_cluster(|c, now| c.fail(&run_id, reason, now));
                }
                Message::Error(ErrorMsg { code: error_code::STORE_FAILED.into(), text: format!("{run_id}: {e}") })
            }
        }
    }

    pub fn rejected(&self, text: String) {
        let _ = self.bus.send(BusEvent::Rejected { text: text.into() });
    }
}

fn batch_view(c: &Cluster, b: &Batch) -> BatchView {
    let rollup = c.rollup(b);
    let terminal: usize = rollup.iter().filter(|(s, _)| s.is_terminal()).map(|(_, n)| n).sum();
    BatchView { batch: b.clone(), complete: terminal == b.run_ids.len(), rollup }
}

fn load_all<T: serde::de::DeserializeOwned>(store: &Datastore, kind: Kind) -> Result<Vec<T>, OpenError> {
    store
        .catalog
        .list(kind, "")?
        .into_iter()
        .map(|e| {
            serde_json::from_value(e.body).map_err(|err| OpenError::Unreadable {
                kind,
                id: e.id,
                reason: err.to_string(),
            })
        })
        .collect()
}
