//! Central coordinator: node registry, scheduling, batch lifecycle, command
//! routing and the HTTP API.
//!
//! All run and node transitions go through [`cluster::Cluster`] under one
//! lock, so its transition log is a total order over the cluster's history.

pub mod api;
pub mod cluster;
pub mod net;
pub mod service;

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use cluster::{
    replay_log, Batch, Cluster, ControlError, Liveness, LogEntry, LogEvent, NodeInfo, NodeStatus, RunState,
};
pub use service::{BatchView, Manager, ManagerConfig, OpenError, RunView};

/// Addresses a started manager is listening on.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub nodes: SocketAddr,
    pub http: SocketAddr,
}

/// Binds both listeners and spawns the node server, liveness ticker and
/// HTTP server on the current runtime.
pub async fn start(
    config: ManagerConfig,
    listen: SocketAddr,
    http: SocketAddr,
) -> anyhow::Result<(Arc<Manager>, Bound)> {
    let ui_dir = config.ui_dir.clone();
    let manager = Manager::open(config)?;
    let node_listener = TcpListener::bind(listen).await?;
    let http_listener = TcpListener::bind(http).await?;
    let bound = Bound { nodes: node_listener.local_addr()?, http: http_listener.local_addr()? };
    tokio::spawn(net::serve_nodes(manager.clone(), node_listener));
    tokio::spawn(net::watch_liveness(manager.clone()));
    let app = api::router(manager.clone(), ui_dir);
    tokio::spawn(async move {
        if let Err(e) = axum::serve(http_listener, app).await {
            tracing::error!(error = %e, "http server stopped");
        }
    });
    tracing::info!(nodes = %bound.nodes, http = %bound.http, "manager listening");
    Ok((manager, bound))
}

/// A manager on its own runtime thread, for tests and embedding.
pub struct ManagerHandle {
    pub manager: Arc<Manager>,
    pub bound: Bound,
    runtime: Option<tokio::runtime::Runtime>,
}

impl ManagerHandle {
    pub fn start(config: ManagerConfig, listen: SocketAddr, http: SocketAddr) -> anyhow::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
        let (manager, bound) = runtime.block_on(start(config, listen, http))?;
        Ok(Self { manager, bound, runtime: Some(runtime) })
    }

    /// Local ephemeral ports on both interfaces.
    pub fn start_local(config: ManagerConfig) -> anyhow::Result<Self> {
        let any: SocketAddr = "127.0.0.1:0".parse().expect("valid address");
        Self::start(config, any, any)
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.bound.http)
    }

    /// Stops every task; open connections drop.
    pub fn shutdown(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(std::time::Duration::from_secs(1));
        }
    }
}

impl Drop for ManagerHandle {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
