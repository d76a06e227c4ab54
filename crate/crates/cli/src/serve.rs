use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use refsep_service::{serve, AppState, ServiceConfig, DEFAULT_PORT};

use crate::candidates::load_model;
use crate::{classify, usage};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, env = "REFSEP_MODEL")]
    model: PathBuf,
    #[arg(long, env = "REFSEP_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Separation jobs run at once.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Upload size cap in MiB.
    #[arg(long, default_value_t = 64)]
    max_upload_mb: usize,
    /// Browser origin allowed by CORS; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
}

pub fn run(a: Args) -> anyhow::Result<()> {
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let prior = load_model(&a.model)?;
    let config = ServiceConfig {
        max_upload_bytes: a.max_upload_mb << 20,
        workers: a.workers,
        cors_origin: a.cors_origin,
        ..Default::default()
    };
    log::info!("building pair table for K={}", prior.k());
    let state = AppState::new(prior, config).map_err(classify)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(serve(SocketAddr::new(a.host, a.port), state))?;
    Ok(())
}
