use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use asa_manager::{Liveness, ManagerConfig};
use clap::Parser;

/// Simulation cluster manager.
#[derive(Debug, Parser)]
#[command(name = "asa-manager", version)]
struct Args {
    /// Node protocol address; `:PORT` binds all interfaces.
    #[arg(long, default_value = ":4810")]
    listen: String,
    /// HTTP API address.
    #[arg(long, default_value = ":8080")]
    http: String,
    /// Data directory for the catalog and record logs.
    #[arg(long, default_value = "asa-data")]
    data: PathBuf,
    /// Directories of extension models (repeatable).
    #[arg(long = "ext-dir")]
    ext_dirs: Vec<PathBuf>,
    /// Static dashboard assets served under /ui.
    #[arg(long)]
    ui: Option<PathBuf>,
    /// Expected node heartbeat interval in seconds.
    #[arg(long, default_value_t = 2.0)]
    heartbeat: f64,
}

fn addr(s: &str) -> anyhow::Result<SocketAddr> {
    let full = if s.starts_with(':') { format!("0.0.0.0{s}") } else { s.to_owned() };
    full.parse().with_context(|| format!("bad address `{s}`"))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    anyhow::ensure!(args.heartbeat > 0.0, "--heartbeat must be positive");
    let mut config = ManagerConfig::new(&args.data);
    config.extension_dirs = args.ext_dirs;
    config.ui_dir = args.ui;
    config.liveness = Liveness { interval_ms: (args.heartbeat * 1000.0) as u64, ..Liveness::default() };
    let (_manager, _bound) = asa_manager::start(config, addr(&args.listen)?, addr(&args.http)?).await?;
    tokio::signal::ctrl_c().await?;
    tracing::info!("shutting down");
    Ok(())
}
