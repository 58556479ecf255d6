//! `mmkit-serve`: the demo API on top of configured models and datasets.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use mmkit_service::{router, state_from_file, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "mmkit-serve", version, about = "Serve captioning, VQA, search and dataset browsing over HTTP")]
struct Args {
    /// Service config (YAML) listing models, datasets and galleries.
    #[arg(long)]
    service_cfg: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let state = tokio::task::spawn_blocking(move || state_from_file(&args.service_cfg)).await??;
    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
