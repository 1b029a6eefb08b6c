//! Training pipeline, model bundles and the HTTP service for browsing
//! patients, serving condition-gated recommendations and collecting study
//! decisions.

pub mod api;
pub mod bundle;
pub mod config;
pub mod dataset;
pub mod decisions;
pub mod pipeline;
pub mod pseudonym;
pub mod state;

use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::router;
pub use bundle::ModelBundle;
pub use config::TrainConfig;
pub use state::{AppState, ServeConfig};

/// Serves until the process receives Ctrl-C.
pub async fn serve(state: Arc<AppState>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
