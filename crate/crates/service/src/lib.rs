//! HTTP+JSON API under `/api/v1`: game sessions, frame classification,
//! template registration, harvest statistics and background training jobs.

mod config;
mod error;
mod routes;
mod state;

pub use config::ServiceConfig;
pub use error::{ApiError, ErrorCode};
pub use routes::{handle_classify, open_session, router, CreateSession, DatasetStats, FrameRequest, JobCreated, ModelList, SessionCreated, TemplatesRegistered};
pub use state::{AppState, JobStatus, TrainJob, TrainRequest, HARVEST_DATASET};

/// Binds `0.0.0.0:port` and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::open(&cfg).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", cfg.port)).await?;
    tracing::info!(port = cfg.port, model = %state.serving_model().id, "listening");
    axum::serve(listener, router(state)).await
}
