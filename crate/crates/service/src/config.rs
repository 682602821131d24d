use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use qcollab_core::session::Condition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrainChoice {
    /// Retrain on the request thread.
    Inline,
    /// Retrain on a worker thread per engine.
    Background,
}

#[derive(Debug, Clone, Args)]
pub struct ServiceConfig {
    #[arg(long, env = "QCOLLAB_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, env = "QCOLLAB_STORAGE_DIR", default_value = "./sessions")]
    pub storage_dir: PathBuf,
    /// Minimum time between retrain starts, in milliseconds.
    #[arg(
        long,
        env = "QCOLLAB_MIN_RETRAIN_INTERVAL_MS",
        default_value_t = 10_000
    )]
    pub min_retrain_interval_ms: u64,
    /// Default number of suggestions per request.
    #[arg(long, env = "QCOLLAB_SUGGESTION_K", default_value_t = 5)]
    pub suggestion_k: usize,
    /// Condition used when a create request names none.
    #[arg(long, env = "QCOLLAB_DEFAULT_CONDITION", default_value = "D")]
    pub default_condition: Condition,
    #[arg(long, env = "QCOLLAB_RETRAIN", value_enum, default_value_t = RetrainChoice::Background)]
    pub retrain: RetrainChoice,
    /// Timer and retrain polling period, in milliseconds.
    #[arg(long, env = "QCOLLAB_TICK_MS", default_value_t = 250)]
    pub tick_ms: u64,
    /// Write a snapshot after this many new log lines.
    #[arg(long, env = "QCOLLAB_SNAPSHOT_EVERY", default_value_t = 50)]
    pub snapshot_every: usize,
    /// Prefix for the coder links returned on session creation.
    #[arg(long, env = "QCOLLAB_PUBLIC_URL", default_value = "")]
    pub public_url: String,
}

impl ServiceConfig {
    /// Defaults with storage under `dir`.
    pub fn with_storage(dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            listen: "127.0.0.1:0".parse().unwrap(),
            storage_dir: dir.into(),
            min_retrain_interval_ms: 10_000,
            suggestion_k: 5,
            default_condition: Condition::D,
            retrain: RetrainChoice::Background,
            tick_ms: 250,
            snapshot_every: 50,
            public_url: String::new(),
        }
    }
}
