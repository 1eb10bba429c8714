use scfam_server::{serve, AppState, ADDR_ENV, DEFAULT_ADDR, OUT_ROOT_ENV};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let addr = std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.to_string());
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(addr = %listener.local_addr()?, out_root = %root, "listening");
    serve(listener, AppState::new(root)).await
}
