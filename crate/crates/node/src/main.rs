use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use asa_core::engine::registry::load_registry;
use asa_node::{run_node, NodeConfig, Shutdown};
use clap::Parser;

/// ASA worker daemon.
#[derive(Debug, Parser)]
#[command(name = "asa-node", version)]
struct Args {
    /// Manager node-protocol address.
    #[arg(long, env = "ASA_MANAGER", default_value = "127.0.0.1:4810")]
    manager: String,
    #[arg(long)]
    id: String,
    #[arg(long, default_value_t = 1)]
    capacity: u32,
    /// Seconds between heartbeats.
    #[arg(long, default_value_t = 2.0)]
    heartbeat: f64,
    /// Directories of extension manifests.
    #[arg(long = "ext-dir", num_args = 1..)]
    ext_dirs: Vec<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let mut config = NodeConfig::new(args.id, args.manager);
    config.capacity = args.capacity;
    config.heartbeat_interval =
        Duration::try_from_secs_f64(args.heartbeat).context("--heartbeat must be a positive number of seconds")?;
    config.extension_dirs = args.ext_dirs;
    config.validate()?;
    let registry = load_registry(&config.extension_dirs).context("loading extensions")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(run_node(config, Arc::new(registry), async {
        let _ = tokio::signal::ctrl_c().await;
        Shutdown::Graceful
    }))?;
    Ok(())
}
