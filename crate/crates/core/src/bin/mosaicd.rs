use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mosaic::server::{self, ServerConfig, ServerError, ServerOptions};
use mosaic::store::Fixture;
use mosaic::tracking::FeedMode;

/// Coordination server for tracked table-top devices.
#[derive(Debug, Parser)]
#[command(name = "mosaicd", version)]
struct Args {
    /// Device registry and tuning (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Address for device connections.
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: SocketAddr,
    /// Tracking source to ingest frames from.
    #[arg(long)]
    tracking: Option<SocketAddr>,
    #[arg(long, default_value = "poll")]
    tracking_mode: FeedMode,
    /// SQLite database file; created if missing.
    #[arg(long)]
    db: Option<PathBuf>,
    /// NDJSON event log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resource fixture imported at startup.
    #[arg(long)]
    seed: Option<PathBuf>,
    /// Address for the browser WebSocket bridge.
    #[arg(long)]
    web_bridge: Option<SocketAddr>,
    /// Rebuild the final model state from an event log, print it and exit.
    #[arg(long, conflicts_with_all = ["config", "db", "seed", "tracking", "web_bridge"])]
    replay: Option<PathBuf>,
}

fn init_logging() {
    let level = std::env::var("MOSAIC_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).init();
}

fn options(args: &Args) -> Result<ServerOptions, ServerError> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| ServerError::ConfigInvalid("--config is required".into()))?;
    let config = ServerConfig::from_file(path)?;
    let seed = match &args.seed {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ServerError::ConfigInvalid(format!("{}: {e}", p.display())))?;
            Some(Fixture::from_json(&text).map_err(|e| ServerError::ConfigInvalid(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut opts = ServerOptions::new(config, args.listen);
    opts.tracking = args.tracking;
    opts.tracking_mode = args.tracking_mode;
    opts.db = args.db.clone();
    opts.log = args.log.clone();
    opts.seed = seed;
    opts.web_bridge = args.web_bridge;
    Ok(opts)
}

fn main() -> ExitCode {
    init_logging();
    let args = Args::parse();
    if let Some(path) = &args.replay {
        return match server::replay_file(path) {
            Ok(model) => {
                println!("{}", model.state_json());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("mosaicd: {e}");
                ExitCode::FAILURE
            }
        };
    }
    let result = options(&args).and_then(|opts| {
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(server::run(opts))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mosaicd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
