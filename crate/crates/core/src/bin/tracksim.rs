use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use mosaic::tracking::{serve_script, FeedMode, MotionScript, ScriptSource};
use tokio::net::TcpListener;

/// Serves a scripted motion over the tracking protocol.
#[derive(Debug, Parser)]
#[command(name = "tracksim", version)]
struct Args {
    /// Motion script (JSON).
    #[arg(long)]
    script: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7001")]
    listen: SocketAddr,
    #[arg(long, default_value = "poll")]
    mode: FeedMode,
}

async fn run(args: Args) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.script).map_err(|e| format!("{}: {e}", args.script.display()))?;
    let script = MotionScript::from_json(&text).map_err(|e| e.to_string())?;
    let listener = TcpListener::bind(args.listen).await.map_err(|e| format!("bind {}: {e}", args.listen))?;
    log::info!("serving {} on {} ({:?})", args.script.display(), args.listen, args.mode);
    tokio::select! {
        r = serve_script(listener, Arc::new(ScriptSource::wall(script)), args.mode) => r.map_err(|e| e.to_string()),
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}

fn main() -> ExitCode {
    let level = std::env::var("MOSAIC_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).init();
    let args = Args::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tracksim: {e}");
            ExitCode::FAILURE
        }
    }
}
