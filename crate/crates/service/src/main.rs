use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use qcollab_core::clock::SystemClock;
use qcollab_core::codebook::Level;
use qcollab_service::commands::{self, CommandError, ReportFormat};
use qcollab_service::{router, spawn_ticker, AppState, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "qcollab",
    version,
    about = "Collaborative qualitative coding service and tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    First,
    Second,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServiceConfig),
    /// Replay a session log and write its metrics report.
    Replay {
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Cohen's kappa of two label vectors.
    Kappa {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Coverage of a merged codebook by a coders' codebook.
    Coverage {
        #[arg(long)]
        coders: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        equiv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LevelArg::First)]
        level: LevelArg,
    },
    /// Print the sentence spans of a text file.
    Segment { doc: PathBuf },
}

fn run_offline(command: Command) -> Result<String, CommandError> {
    match command {
        Command::Replay { log, out, format } => {
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            let report = commands::replay_log(&log, format)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, report).map_err(|e| CommandError::Read {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                    Ok(String::new())
                }
                None => Ok(report),
            }
        }
        Command::Kappa { a, b } => commands::kappa(&a, &b).map(|s| s + "\n"),
        Command::Coverage {
            coders,
            merged,
            equiv,
            level,
        } => {
            let level = match level {
                LevelArg::First => Level::First,
                LevelArg::Second => Level::Second,
            };
            commands::coverage(&coders, &merged, equiv.as_deref(), level).map(|s| s + "\n")
        }
        Command::Segment { doc } => commands::segment(&doc),
        Command::Serve(_) => unreachable!(),
    }
}

async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let listen = config.listen;
    let state = AppState::open(config, Arc::new(SystemClock)).context("opening session storage")?;
    let ticker = spawn_ticker(Arc::clone(&state));
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .with_context(|| format!("binding {listen}"))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::clone(&state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    ticker.abort();
    state.shutdown();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Serve(config) => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
                )
                .init();
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(r) => r,
                Err(e) => {
                    eprintln!(
                        "{}",
                        serde_json::json!({ "error": "runtime", "message": e.to_string() })
                    );
                    return ExitCode::FAILURE;
                }
            };
            match runtime.block_on(serve(config)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!(
                        "{}",
                        serde_json::json!({ "error": "serve", "message": format!("{e:#}") })
                    );
                    ExitCode::FAILURE
                }
            }
        }
        other => match run_offline(other) {
            Ok(out) => {
                print!("{out}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}", e.to_json());
                ExitCode::FAILURE
            }
        },
    }
}
