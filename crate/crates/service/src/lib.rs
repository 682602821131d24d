//! HTTP service, session persistence and offline commands for collaborative
//! coding sessions.

pub mod api;
pub mod commands;
pub mod config;
pub mod state;
pub mod store;

use std::sync::Arc;
use std::time::Duration;

pub use api::router;
pub use config::ServiceConfig;
pub use state::AppState;

/// Periodically fire session timers and due retrains.
pub fn spawn_ticker(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    let period = Duration::from_millis(state.config.tick_ms.max(1));
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            let s = Arc::clone(&state);
            if tokio::task::spawn_blocking(move || s.tick_all())
                .await
                .is_err()
            {
                tracing::error!("tick task panicked");
            }
        }
    })
}
