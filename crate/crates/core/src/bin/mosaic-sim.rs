use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mosaic::simclient::{run_scenario, AssertionFile, RunOptions, Scenario, TrackingHost};
use mosaic::tracking::FeedMode;
use mosaic::DeviceId;
use tokio::net::TcpListener;

/// Plays a gesture scenario against a running server with simulated devices.
#[derive(Debug, Parser)]
#[command(name = "mosaic-sim", version)]
struct Args {
    /// Server device address.
    #[arg(long, default_value = "127.0.0.1:7000")]
    server: SocketAddr,
    /// Comma-separated device ids to simulate; defaults to all.
    #[arg(long, value_delimiter = ',')]
    devices: Option<Vec<DeviceId>>,
    /// Scenario file: devices, motion and gestures.
    #[arg(long)]
    gestures: PathBuf,
    /// Assertion file.
    #[arg(long)]
    assert: Option<PathBuf>,
    /// Jump between steps on a virtual clock instead of waiting.
    #[arg(long)]
    fast: bool,
    /// Serve the scenario's motion here; point the server's --tracking at it.
    #[arg(long)]
    tracking_listen: Option<SocketAddr>,
    #[arg(long, default_value = "poll")]
    tracking_mode: FeedMode,
    /// Write the command log here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &PathBuf) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

async fn run(args: Args) -> Result<bool, String> {
    let scenario = Scenario::from_json(&read(&args.gestures)?).map_err(|e| e.to_string())?;
    let assertions = match &args.assert {
        Some(p) => AssertionFile::from_json(&read(p)?).map_err(|e| e.to_string())?.assertions,
        None => Vec::new(),
    };
    let host = match (&args.tracking_listen, &scenario.motion) {
        (Some(addr), Some(motion)) => {
            let listener = TcpListener::bind(addr).await.map_err(|e| format!("bind {addr}: {e}"))?;
            Some(TrackingHost::start(listener, motion.clone(), args.tracking_mode, args.fast).map_err(|e| e.to_string())?)
        }
        _ => None,
    };
    let opts = RunOptions { server: args.server, devices: args.devices.clone(), fast: args.fast };
    let report = run_scenario(&scenario, &assertions, host.as_ref(), &opts).await.map_err(|e| e.to_string())?;
    match &args.out {
        Some(p) => std::fs::write(p, &report.log).map_err(|e| format!("{}: {e}", p.display()))?,
        None => print!("{}", report.log),
    }
    eprintln!(
        "{}: {} commands in {:.2?}",
        if scenario.name.is_empty() { "scenario" } else { &scenario.name },
        report.commands.len(),
        report.elapsed
    );
    eprintln!("{} screen state matches server dump", if report.dumps_match() { "PASS" } else { "FAIL" });
    for a in &report.assertions {
        eprintln!("{} {} ({})", if a.passed { "PASS" } else { "FAIL" }, a.description, a.detail);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let level = std::env::var("MOSAIC_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&level).init();
    let args = Args::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(args)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("mosaic-sim: {e}");
            ExitCode::from(2)
        }
    }
}
