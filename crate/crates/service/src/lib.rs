//! HTTP authoring service: generation, scoring and draft curation over a
//! loaded model, with drafts persisted in an append-only event log.

pub mod api;
pub mod model;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, AppState};
pub use model::{read_backend, Backend, LoadedModel};
pub use store::{DraftStore, ItemDraft, SampleStatus, StoreError};

/// Binds `addr` and serves until the process ends. The model may be set on
/// `state` at any time; until then model endpoints answer 503.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
