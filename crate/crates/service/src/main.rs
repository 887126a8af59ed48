use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use gsgn_service::{router, ServiceState, DEFAULT_MAX_EDGE};

/// Serves a gsgn checkpoint over HTTP. Send SIGHUP to reload the checkpoint file.
#[derive(Parser, Debug)]
#[command(name = "gsgn-serve", version)]
struct Args {
    /// Checkpoint to serve; without one every inference route answers 503.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Longest accepted image side in pixels.
    #[arg(long, default_value_t = DEFAULT_MAX_EDGE)]
    max_edge: usize,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let state = Arc::new(match &args.checkpoint {
        Some(p) => ServiceState::from_path(p, args.max_edge)?,
        None => ServiceState::new(args.max_edge),
    });
    if let Some(e) = state.current() {
        tracing::info!(model = %e.model_id(), tasks = ?e.tasks(), "checkpoint loaded");
    } else {
        tracing::warn!("no checkpoint given; serving 503");
    }
    #[cfg(unix)]
    if args.checkpoint.is_some() {
        let state = state.clone();
        tokio::spawn(async move {
            use tokio::signal::unix::{signal, SignalKind};
            let Ok(mut hup) = signal(SignalKind::hangup()) else { return };
            while hup.recv().await.is_some() {
                let s = state.clone();
                match tokio::task::spawn_blocking(move || s.reload()).await {
                    Ok(Ok(())) => tracing::info!(model = ?state.current().map(|e| e.model_id()), "checkpoint reloaded"),
                    Ok(Err(e)) => tracing::error!(error = %e, "reload failed; keeping the previous snapshot"),
                    Err(e) => tracing::error!(error = %e, "reload task failed"),
                }
            }
        });
    }
    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
