//! HTTP review service for the hard-mining loop: hands out frames with the
//! current model's detections and turns expert verdicts into stored
//! training samples.

mod error;
mod routes;
mod state;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

pub use error::{ApiError, ServiceError};
pub use routes::router;
pub use state::{verdict_hash, AppState, LoadedModel, ReviewRecord, ServiceConfig, REVIEWS_FILE};

/// Serves on an already bound listener until `shutdown` resolves, then
/// flushes the store manifest and review records.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = router(state.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServiceError::Server)?;
    state.flush()?;
    log::info!("store flushed, service stopped");
    Ok(())
}

/// Opens the corpus, model and store, binds `addr` and serves until
/// `shutdown` resolves.
pub async fn serve(
    cfg: &ServiceConfig,
    addr: SocketAddr,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::open(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    log::info!(
        "serving {} frames on {} with model {}",
        state.frames.len(),
        listener.local_addr().map_err(ServiceError::Server)?,
        state.model().hash
    );
    serve_on(listener, state, shutdown).await
}
