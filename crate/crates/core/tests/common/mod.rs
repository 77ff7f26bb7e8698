#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use mosaic::server::{self, ServerConfig, ServerHandle, ServerOptions};
use mosaic::simclient::{run_scenario, Assertion, AssertionFile, RunOptions, Scenario, ScenarioReport, TrackingHost};
use mosaic::store::Fixture;
use mosaic::tracking::FeedMode;
use tokio::net::TcpListener;

pub fn scenario_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(file).display()))
}

pub struct ScenarioFiles {
    pub config: ServerConfig,
    pub fixture: Fixture,
    pub scenario: Scenario,
    pub assertions: Vec<Assertion>,
}

pub fn load_scenario(name: &str) -> ScenarioFiles {
    let dir = scenario_dir(name);
    ScenarioFiles {
        config: ServerConfig::from_json(&read(&dir, "config.json")).unwrap(),
        fixture: Fixture::from_json(&read(&dir, "fixture.json")).unwrap(),
        scenario: Scenario::from_json(&read(&dir, "scenario.json")).unwrap(),
        assertions: AssertionFile::from_json(&read(&dir, "assert.json")).unwrap().assertions,
    }
}

pub fn localhost() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

pub struct GoldenRun {
    pub report: ScenarioReport,
    pub final_state: String,
}

/// Runs a scenario end to end against a fresh in-process server in fast
/// mode. `tweak` may adjust server options (log path, db) before start.
pub async fn run_fast(files: &ScenarioFiles, tweak: impl FnOnce(&mut ServerOptions)) -> GoldenRun {
    let motion = files.scenario.motion.clone().expect("scenario has motion");
    let host = TrackingHost::start(TcpListener::bind(localhost()).await.unwrap(), motion, FeedMode::Poll, true).unwrap();
    let mut opts = ServerOptions::new(files.config.clone(), localhost());
    opts.tracking = Some(host.addr);
    opts.seed = Some(files.fixture.clone());
    tweak(&mut opts);
    let server = server::start(opts).await.unwrap();
    let run = RunOptions { server: server.local_addr(), devices: None, fast: true };
    let report = run_scenario(&files.scenario, &files.assertions, Some(&host), &run).await.unwrap();
    let final_state = server.shutdown().await.unwrap();
    GoldenRun { report, final_state }
}

pub async fn start_plain(config: ServerConfig, fixture: Option<Fixture>) -> ServerHandle {
    let mut opts = ServerOptions::new(config, localhost());
    opts.seed = fixture;
    server::start(opts).await.unwrap()
}

pub mod oracle;
pub mod crash;
