//! HTTP front end: point look-ups, indexed queries, labeling sessions and
//! patch images over a loaded signature store.

pub mod config;
pub mod http;
pub mod patch;
pub mod query;
pub mod session;

use std::sync::Arc;

pub use config::ServiceConfig;
pub use http::{router, ApiError, AppState, Dataset};
pub use query::{query_response, MatchEntry, QueryResponse, QueryTarget, SiteResponse};

/// Binds `config.bind` and serves until the process ends. The dataset loads
/// in the background; data endpoints answer 503 until it is ready.
pub async fn serve(config: ServiceConfig) -> sigmine_core::Result<()> {
    let addr = config.bind;
    let state = Arc::new(AppState::new(config)?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Dataset::load(&loader.config) {
        Ok(d) => loader.set_dataset(d),
        Err(e) => {
            eprintln!("dataset failed to load: {e}");
            loader.set_load_failure(e.to_string());
        }
    });
    let io = |e| sigmine_core::Error::Io {
        path: addr.to_string().into(),
        source: e,
    };
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
    eprintln!("listening on {}", listener.local_addr().map_err(io)?);
    axum::serve(listener, router(state)).await.map_err(io)
}
