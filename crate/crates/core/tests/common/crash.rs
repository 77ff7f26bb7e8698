//! Kills a process that is busy persisting placements and inspects what
//! survived. The child is the calling test binary itself, re-executed with
//! an environment variable that routes it into [`child_entry`].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use mosaic::geometry::Vec2;
use mosaic::store::{Fixture, FixtureResource, PlacementWriter, Store};

const CHILD_ENV: &str = "MOSAIC_CRASH_CHILD_DB";
const RESOURCES: u32 = 20;
pub const FLUSH_INTERVAL: Duration = Duration::from_millis(250);

fn epoch_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis() as u64
}

/// Call first thing in the test named by `kill_during_flush`'s
/// `child_test`. Returns immediately unless running as the child.
pub fn child_entry() {
    let Ok(db) = std::env::var(CHILD_ENV) else { return };
    let fixture = Fixture {
        devices: vec![],
        resources: (1..=RESOURCES)
            .map(|id| FixtureResource {
                resource_id: id,
                text: format!("note {id}"),
                tags: Default::default(),
                timestamp: None,
                host_device: None,
                x_px: 0.0,
                y_px: 0.0,
            })
            .collect(),
        relations: vec![],
        relate_shared_tags: false,
    };
    Store::open(&db).unwrap().import(&fixture).unwrap();
    let writer = PlacementWriter::start(&db, FLUSH_INTERVAL).unwrap();
    let mut out = std::io::stdout().lock();
    writeln!(out, "@ready").unwrap();
    out.flush().unwrap();
    for seq in 1u64.. {
        for id in 1..=RESOURCES {
            writer.persist_placement(id, None, Vec2::new(seq as f64, id as f64));
        }
        writeln!(out, "@{seq} {}", epoch_ms()).unwrap();
        out.flush().unwrap();
        std::thread::sleep(Duration::from_micros(500));
    }
}

#[derive(Debug)]
pub struct CrashOutcome {
    pub integrity_ok: bool,
    /// Newest update every resource agrees on.
    pub stored_seq: u64,
    pub last_seq: u64,
    /// Time between the newest persisted update and the kill.
    pub loss_ms: u64,
}

pub fn kill_during_flush(child_test: &str, dir: &Path, run_for: Duration) -> CrashOutcome {
    let db = dir.join("crash.db");
    let _ = std::fs::remove_file(&db);
    let mut child = Command::new(std::env::current_exe().unwrap())
        .args([child_test, "--exact", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, &db)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let (tx, rx) = mpsc::channel();
    let reader = std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            // libtest may print its own progress on the same line.
            if let Some(at) = line.find('@') {
                if tx.send(line[at + 1..].to_string()).is_err() {
                    break;
                }
            }
        }
    });
    assert_eq!(rx.recv_timeout(Duration::from_secs(10)).unwrap(), "ready");
    std::thread::sleep(run_for);
    child.kill().unwrap();
    let kill_ms = epoch_ms();
    child.wait().unwrap();
    reader.join().unwrap();

    let times: BTreeMap<u64, u64> = rx
        .try_iter()
        .filter_map(|l| {
            let (seq, ms) = l.split_once(' ')?;
            Some((seq.parse().ok()?, ms.parse().ok()?))
        })
        .collect();
    let store = Store::open_existing(&db).unwrap();
    let integrity_ok = store.integrity_ok().unwrap();
    let stored_seq = (1..=RESOURCES)
        .map(|id| store.placement(id).unwrap().unwrap().local_pos.x as u64)
        .min()
        .unwrap();
    let last_seq = times.keys().next_back().copied().unwrap_or(0);
    let persisted_at = times.get(&stored_seq).copied().unwrap_or(0);
    CrashOutcome { integrity_ok, stored_seq, last_seq, loss_ms: kill_ms.saturating_sub(persisted_at) }
}
