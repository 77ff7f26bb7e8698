//! Single-file SQLite persistence for resources, relations and the device
//! registry.
//!
//! Content (text, tags, timestamps, relations) is written once at import.
//! Placements change at gesture rate and go through [`PlacementWriter`],
//! which batches them and commits at a fixed interval.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, error};
use rusqlite::{params, Connection, OpenFlags, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ScreenSpec, Vec2};
use crate::model::{Relation, RelationKind, Resource};
use crate::{DeviceId, ResourceId};

pub const SCHEMA_VERSION: i64 = 1;
pub const DEFAULT_FLUSH_INTERVAL: Duration = Duration::from_millis(250);

const SCHEMA: &str = "
CREATE TABLE devices (
    device_id INTEGER PRIMARY KEY,
    width_px  REAL NOT NULL,
    height_px REAL NOT NULL,
    width_mm  REAL NOT NULL,
    height_mm REAL NOT NULL
);
CREATE TABLE resources (
    resource_id INTEGER PRIMARY KEY,
    text        TEXT NOT NULL,
    timestamp   INTEGER,
    host_device INTEGER REFERENCES devices(device_id),
    local_x_px  REAL NOT NULL,
    local_y_px  REAL NOT NULL
);
CREATE TABLE tags (
    resource_id INTEGER NOT NULL REFERENCES resources(resource_id) ON DELETE CASCADE,
    tag         TEXT NOT NULL,
    PRIMARY KEY (resource_id, tag)
);
CREATE TABLE relations (
    a    INTEGER NOT NULL REFERENCES resources(resource_id) ON DELETE CASCADE,
    b    INTEGER NOT NULL REFERENCES resources(resource_id) ON DELETE CASCADE,
    kind TEXT NOT NULL CHECK (kind IN ('reference', 'temporal')),
    PRIMARY KEY (a, b, kind),
    CHECK (a <> b),
    CHECK (kind <> 'reference' OR a < b)
);
";

const EXPECTED_COLUMNS: &[(&str, &[&str])] = &[
    ("devices", &["device_id", "width_px", "height_px", "width_mm", "height_mm"]),
    ("resources", &["resource_id", "text", "timestamp", "host_device", "local_x_px", "local_y_px"]),
    ("tags", &["resource_id", "tag"]),
    ("relations", &["a", "b", "kind"]),
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store {path} is corrupt: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("store {path} has an unexpected schema: {detail}")]
    SchemaMismatch { path: PathBuf, detail: String },
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreContents {
    pub devices: BTreeMap<DeviceId, ScreenSpec>,
    pub resources: BTreeMap<ResourceId, Resource>,
    pub relations: BTreeSet<Relation>,
}

/// Last known placement of one resource.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub host_device: Option<DeviceId>,
    pub local_pos: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDevice {
    pub device_id: DeviceId,
    pub screen: ScreenSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResource {
    pub resource_id: ResourceId,
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub timestamp: Option<i64>,
    #[serde(default)]
    pub host_device: Option<DeviceId>,
    #[serde(default)]
    pub x_px: f64,
    #[serde(default)]
    pub y_px: f64,
}

impl FixtureResource {
    pub fn to_resource(&self) -> Resource {
        Resource {
            resource_id: self.resource_id,
            text: self.text.clone(),
            tags: self.tags.clone(),
            timestamp: self.timestamp,
            host_device: self.host_device,
            local_pos: Vec2::new(self.x_px, self.y_px),
        }
    }
}

fn yes() -> bool {
    true
}

/// A resource set to import, e.g. one scenario's clues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub devices: Vec<FixtureDevice>,
    pub resources: Vec<FixtureResource>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    /// Also relate every pair of resources sharing a tag.
    #[serde(default = "yes")]
    pub relate_shared_tags: bool,
}

impl Fixture {
    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let f: Fixture = serde_json::from_str(text).map_err(|e| StoreError::InvalidFixture(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidFixture(m));
        let mut ids = BTreeSet::new();
        for r in &self.resources {
            if !ids.insert(r.resource_id) {
                return bad(format!("duplicate resource id {}", r.resource_id));
            }
            if !(r.x_px.is_finite() && r.y_px.is_finite()) {
                return bad(format!("resource {} has a non-finite position", r.resource_id));
            }
        }
        for d in &self.devices {
            if !d.screen.is_valid() {
                return bad(format!("device {} has an invalid screen", d.device_id));
            }
        }
        for rel in &self.relations {
            if rel.a == rel.b || !ids.contains(&rel.a) || !ids.contains(&rel.b) {
                return bad(format!("relation ({}, {}) refers to unknown or identical resources", rel.a, rel.b));
            }
        }
        Ok(())
    }

    /// Explicit relations plus, if enabled, shared-tag reference relations.
    pub fn all_relations(&self) -> BTreeSet<Relation> {
        let mut out: BTreeSet<Relation> = self
            .relations
            .iter()
            .filter_map(|r| Relation::new(r.a, r.b, r.kind).ok())
            .collect();
        if self.relate_shared_tags {
            let mut by_tag: BTreeMap<&str, Vec<ResourceId>> = BTreeMap::new();
            for r in &self.resources {
                for t in &r.tags {
                    by_tag.entry(t.as_str()).or_default().push(r.resource_id);
                }
            }
            for ids in by_tag.values() {
                for (i, a) in ids.iter().enumerate() {
                    for b in &ids[i + 1..] {
                        if let Ok(rel) = Relation::reference(*a, *b) {
                            out.insert(rel);
                        }
                    }
                }
            }
        }
        out
    }
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Corrupt { path: path.to_owned(), detail: e.to_string() }
}

fn mismatch(path: &Path, detail: impl Into<String>) -> StoreError {
    StoreError::SchemaMismatch { path: path.to_owned(), detail: detail.into() }
}

fn configure(conn: &Connection, path: &Path) -> Result<(), StoreError> {
    conn.busy_timeout(Duration::from_secs(5))?;
    conn.pragma_update(None, "foreign_keys", "ON").map_err(|e| corrupt(path, e))?;
    conn.pragma_update(None, "synchronous", "NORMAL").map_err(|e| corrupt(path, e))?;
    conn.query_row("PRAGMA journal_mode = WAL", [], |r| r.get::<_, String>(0))
        .map_err(|e| corrupt(path, e))?;
    Ok(())
}

fn verify(conn: &Connection, path: &Path) -> Result<(), StoreError> {
    let check: String = conn
        .query_row("PRAGMA integrity_check", [], |r| r.get(0))
        .map_err(|e| corrupt(path, e))?;
    if check != "ok" {
        return Err(corrupt(path, check));
    }
    let version: i64 = conn.query_row("PRAGMA user_version", [], |r| r.get(0)).map_err(|e| corrupt(path, e))?;
    if version != SCHEMA_VERSION {
        return Err(mismatch(path, format!("schema version {version}, expected {SCHEMA_VERSION}; not migrating")));
    }
    for (table, columns) in EXPECTED_COLUMNS {
        let mut stmt = conn.prepare("SELECT name FROM pragma_table_info(?1)")?;
        let found: BTreeSet<String> =
            stmt.query_map([table], |r| r.get(0))?.collect::<Result<_, _>>()?;
        if found.is_empty() {
            return Err(mismatch(path, format!("missing table `{table}`")));
        }
        for c in *columns {
            if !found.contains(*c) {
                return Err(mismatch(path, format!("table `{table}` lacks column `{c}`")));
            }
        }
    }
    Ok(())
}

fn is_blank(conn: &Connection, path: &Path) -> Result<bool, StoreError> {
    let n: i64 = conn
        .query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get(0))
        .map_err(|e| corrupt(path, e))?;
    let version: i64 = conn.query_row("PRAGMA user_version", [], |r| r.get(0)).map_err(|e| corrupt(path, e))?;
    Ok(n == 0 && version == 0)
}

pub struct Store {
    conn: Connection,
    path: PathBuf,
}

impl Store {
    /// Opens the database at `path`, creating the schema if the file is new
    /// or empty. Existing files must pass an integrity check and carry the
    /// expected schema.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_owned();
        let conn = Connection::open(&path).map_err(|e| corrupt(&path, e))?;
        configure(&conn, &path)?;
        if is_blank(&conn, &path)? {
            conn.execute_batch(&format!("BEGIN; {SCHEMA} PRAGMA user_version = {SCHEMA_VERSION}; COMMIT;"))?;
        }
        verify(&conn, &path)?;
        Ok(Self { conn, path })
    }

    /// Opens an existing database without creating anything.
    pub fn open_existing(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_owned();
        let conn = Connection::open_with_flags(&path, OpenFlags::SQLITE_OPEN_READ_WRITE)
            .map_err(|e| corrupt(&path, e))?;
        configure(&conn, &path)?;
        verify(&conn, &path)?;
        Ok(Self { conn, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn integrity_ok(&self) -> Result<bool, StoreError> {
        let check: String = self.conn.query_row("PRAGMA integrity_check", [], |r| r.get(0))?;
        Ok(check == "ok")
    }

    pub fn load(&self) -> Result<StoreContents, StoreError> {
        let mut out = StoreContents::default();
        let mut stmt = self
            .conn
            .prepare("SELECT device_id, width_px, height_px, width_mm, height_mm FROM devices")?;
        let rows = stmt.query_map([], |r| {
            Ok((
                r.get::<_, DeviceId>(0)?,
                ScreenSpec { width_px: r.get(1)?, height_px: r.get(2)?, width_mm: r.get(3)?, height_mm: r.get(4)? },
            ))
        })?;
        for row in rows {
            let (id, screen) = row?;
            out.devices.insert(id, screen);
        }

        let mut stmt = self.conn.prepare(
            "SELECT resource_id, text, timestamp, host_device, local_x_px, local_y_px FROM resources",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok(Resource {
                resource_id: r.get(0)?,
                text: r.get(1)?,
                tags: BTreeSet::new(),
                timestamp: r.get(2)?,
                host_device: r.get(3)?,
                local_pos: Vec2::new(r.get(4)?, r.get(5)?),
            })
        })?;
        for row in rows {
            let r = row?;
            out.resources.insert(r.resource_id, r);
        }

        let mut stmt = self.conn.prepare("SELECT resource_id, tag FROM tags")?;
        let rows = stmt.query_map([], |r| Ok((r.get::<_, ResourceId>(0)?, r.get::<_, String>(1)?)))?;
        for row in rows {
            let (id, tag) = row?;
            if let Some(r) = out.resources.get_mut(&id) {
                r.tags.insert(tag);
            }
        }

        let mut stmt = self.conn.prepare("SELECT a, b, kind FROM relations")?;
        let rows = stmt.query_map([], |r| {
            Ok((r.get::<_, ResourceId>(0)?, r.get::<_, ResourceId>(1)?, r.get::<_, String>(2)?))
        })?;
        for row in rows {
            let (a, b, kind) = row?;
            let kind = RelationKind::parse(&kind).ok_or_else(|| corrupt(&self.path, format!("relation kind `{kind}`")))?;
            let rel = Relation::new(a, b, kind).map_err(|e| corrupt(&self.path, e))?;
            out.relations.insert(rel);
        }
        Ok(out)
    }

    pub fn upsert_device(&mut self, id: DeviceId, screen: &ScreenSpec) -> Result<(), StoreError> {
        self.conn.execute(
            "INSERT INTO devices (device_id, width_px, height_px, width_mm, height_mm) VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(device_id) DO UPDATE SET width_px = ?2, height_px = ?3, width_mm = ?4, height_mm = ?5",
            params![id, screen.width_px, screen.height_px, screen.width_mm, screen.height_mm],
        )?;
        Ok(())
    }

    /// Imports a fixture in one transaction. Resources with the same id are
    /// replaced along with their tags.
    pub fn import(&mut self, fixture: &Fixture) -> Result<(), StoreError> {
        fixture.validate()?;
        let tx = self.conn.transaction()?;
        for d in &fixture.devices {
            tx.execute(
                "INSERT INTO devices (device_id, width_px, height_px, width_mm, height_mm) VALUES (?1, ?2, ?3, ?4, ?5)
                 ON CONFLICT(device_id) DO UPDATE SET width_px = ?2, height_px = ?3, width_mm = ?4, height_mm = ?5",
                params![d.device_id, d.screen.width_px, d.screen.height_px, d.screen.width_mm, d.screen.height_mm],
            )?;
        }
        for r in &fixture.resources {
            tx.execute("DELETE FROM tags WHERE resource_id = ?1", [r.resource_id])?;
            tx.execute(
                "INSERT INTO resources (resource_id, text, timestamp, host_device, local_x_px, local_y_px)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)
                 ON CONFLICT(resource_id) DO UPDATE SET text = ?2, timestamp = ?3, host_device = ?4,
                     local_x_px = ?5, local_y_px = ?6",
                params![r.resource_id, r.text, r.timestamp, r.host_device, r.x_px, r.y_px],
            )
            .map_err(|e| StoreError::InvalidFixture(format!("resource {}: {e}", r.resource_id)))?;
            for t in &r.tags {
                tx.execute("INSERT INTO tags (resource_id, tag) VALUES (?1, ?2)", params![r.resource_id, t])?;
            }
        }
        for rel in fixture.all_relations() {
            tx.execute(
                "INSERT OR IGNORE INTO relations (a, b, kind) VALUES (?1, ?2, ?3)",
                params![rel.a, rel.b, rel.kind.as_str()],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn add_relation(&mut self, rel: Relation) -> Result<(), StoreError> {
        let rel = Relation::new(rel.a, rel.b, rel.kind).map_err(|e| StoreError::InvalidFixture(e.to_string()))?;
        self.conn.execute(
            "INSERT OR IGNORE INTO relations (a, b, kind) VALUES (?1, ?2, ?3)",
            params![rel.a, rel.b, rel.kind.as_str()],
        )?;
        Ok(())
    }

    pub fn write_placements(&mut self, batch: &BTreeMap<ResourceId, Placement>) -> Result<(), StoreError> {
        write_batch(&mut self.conn, batch)
    }

    pub fn placement(&self, id: ResourceId) -> Result<Option<Placement>, StoreError> {
        Ok(self
            .conn
            .query_row(
                "SELECT host_device, local_x_px, local_y_px FROM resources WHERE resource_id = ?1",
                [id],
                |r| Ok(Placement { host_device: r.get(0)?, local_pos: Vec2::new(r.get(1)?, r.get(2)?) }),
            )
            .optional()?)
    }
}

/// Opens `path` and reads everything in it.
pub fn load(path: impl AsRef<Path>) -> Result<StoreContents, StoreError> {
    Store::open_existing(path)?.load()
}

fn write_batch(conn: &mut Connection, batch: &BTreeMap<ResourceId, Placement>) -> Result<(), StoreError> {
    if batch.is_empty() {
        return Ok(());
    }
    let tx = conn.transaction()?;
    {
        let mut stmt = tx.prepare_cached(
            "UPDATE resources SET host_device = ?2, local_x_px = ?3, local_y_px = ?4 WHERE resource_id = ?1",
        )?;
        for (id, p) in batch {
            stmt.execute(params![id, p.host_device, p.local_pos.x, p.local_pos.y])?;
        }
    }
    tx.commit()?;
    Ok(())
}

struct WriterShared {
    pending: Mutex<BTreeMap<ResourceId, Placement>>,
    conn: Mutex<Connection>,
    stop: AtomicBool,
    wake: Condvar,
    wake_lock: Mutex<()>,
}

impl WriterShared {
    fn flush(&self) -> Result<usize, StoreError> {
        let mut conn = self.conn.lock().expect("store connection poisoned");
        let batch = std::mem::take(&mut *self.pending.lock().expect("pending placements poisoned"));
        write_batch(&mut conn, &batch)?;
        Ok(batch.len())
    }
}

/// Write-behind placement persistence. Updates are coalesced per resource
/// and committed at most `interval` after they were recorded.
pub struct PlacementWriter {
    shared: Arc<WriterShared>,
    thread: Option<JoinHandle<()>>,
}

impl PlacementWriter {
    pub fn start(path: impl AsRef<Path>, interval: Duration) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_WRITE).map_err(|e| corrupt(path, e))?;
        configure(&conn, path)?;
        let shared = Arc::new(WriterShared {
            pending: Mutex::new(BTreeMap::new()),
            conn: Mutex::new(conn),
            stop: AtomicBool::new(false),
            wake: Condvar::new(),
            wake_lock: Mutex::new(()),
        });
        let worker = shared.clone();
        let thread = std::thread::Builder::new()
            .name("placement-writer".into())
            .spawn(move || loop {
                {
                    let guard = worker.wake_lock.lock().expect("writer lock poisoned");
                    if !worker.stop.load(Ordering::SeqCst) {
                        let _ = worker.wake.wait_timeout(guard, interval).expect("writer lock poisoned");
                    }
                }
                match worker.flush() {
                    Ok(n) if n > 0 => debug!("flushed {n} placements"),
                    Ok(_) => {}
                    Err(e) => error!("placement flush failed: {e}"),
                }
                if worker.stop.load(Ordering::SeqCst) {
                    return;
                }
            })?;
        Ok(Self { shared, thread: Some(thread) })
    }

    pub fn persist_placement(&self, id: ResourceId, host_device: Option<DeviceId>, local_pos: Vec2) {
        self.shared
            .pending
            .lock()
            .expect("pending placements poisoned")
            .insert(id, Placement { host_device, local_pos });
    }

    pub fn pending(&self) -> usize {
        self.shared.pending.lock().expect("pending placements poisoned").len()
    }

    /// Commits everything recorded so far.
    pub fn flush(&self) -> Result<(), StoreError> {
        self.shared.flush().map(|_| ())
    }

    /// Final flush, then stops the background thread.
    pub fn shutdown(mut self) -> Result<(), StoreError> {
        self.stop_thread();
        self.shared.flush().map(|_| ())
    }

    fn stop_thread(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        {
            let _g = self.shared.wake_lock.lock().expect("writer lock poisoned");
            self.shared.wake.notify_all();
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PlacementWriter {
    fn drop(&mut self) {
        self.stop_thread();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCREEN: ScreenSpec = ScreenSpec { width_px: 1000.0, height_px: 800.0, width_mm: 200.0, height_mm: 160.0 };

    fn fixture() -> Fixture {
        Fixture::from_json(
            r#"{
              "devices": [{"device_id": 0, "screen": {"width_px":1000,"height_px":800,"width_mm":200,"height_mm":160}}],
              "resources": [
                {"resource_id": 1, "text": "a", "tags": ["butler"], "timestamp": 30, "host_device": 0, "x_px": 10, "y_px": 20},
                {"resource_id": 2, "text": "b", "tags": ["butler", "garden"]},
                {"resource_id": 3, "text": "c", "tags": ["garden"], "host_device": 0, "x_px": 5, "y_px": 5}
              ],
              "relations": [{"a": 3, "b": 1, "kind": "temporal"}, {"a": 3, "b": 1, "kind": "reference"}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn empty_database_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("m.db")).unwrap();
        assert_eq!(store.load().unwrap(), StoreContents::default());
    }

    #[test]
    fn import_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("m.db")).unwrap();
        store.import(&fixture()).unwrap();
        let c = store.load().unwrap();
        assert_eq!(c.devices[&0], SCREEN);
        assert_eq!(c.resources.len(), 3);
        assert_eq!(c.resources[&1].timestamp, Some(30));
        assert_eq!(c.resources[&2].host_device, None);
        assert_eq!(c.resources[&2].tags, BTreeSet::from(["butler".to_string(), "garden".to_string()]));
        let expected: BTreeSet<Relation> = [
            Relation::reference(1, 2).unwrap(),
            Relation::reference(2, 3).unwrap(),
            Relation::reference(1, 3).unwrap(),
            Relation::new(3, 1, RelationKind::Temporal).unwrap(),
        ]
        .into();
        assert_eq!(c.relations, expected);
        // Importing twice changes nothing.
        store.import(&fixture()).unwrap();
        assert_eq!(store.load().unwrap(), c);
    }

    #[test]
    fn reversed_reference_is_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("m.db")).unwrap();
        store.import(&fixture()).unwrap();
        store.add_relation(Relation { a: 2, b: 1, kind: RelationKind::Reference }).unwrap();
        store.add_relation(Relation { a: 1, b: 2, kind: RelationKind::Reference }).unwrap();
        let n: i64 = store
            .conn
            .query_row("SELECT count(*) FROM relations WHERE kind = 'reference' AND a = 1 AND b = 2", [], |r| r.get(0))
            .unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn missing_table_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.db");
        drop(Store::open(&path).unwrap());
        Connection::open(&path).unwrap().execute_batch("DROP TABLE tags").unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::SchemaMismatch { .. })));
        assert!(matches!(load(&path), Err(StoreError::SchemaMismatch { .. })));
    }

    #[test]
    fn foreign_database_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.db");
        Connection::open(&path).unwrap().execute_batch("CREATE TABLE other (x INTEGER)").unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::SchemaMismatch { .. })));
    }

    #[test]
    fn garbage_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.db");
        std::fs::write(&path, vec![0x5au8; 8192]).unwrap();
        assert!(matches!(Store::open(&path), Err(StoreError::Corrupt { .. })));
    }

    #[test]
    fn placements_survive_clean_shutdown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.db");
        let mut store = Store::open(&path).unwrap();
        store.import(&fixture()).unwrap();
        store.upsert_device(1, &SCREEN).unwrap();
        let writer = PlacementWriter::start(&path, Duration::from_secs(60)).unwrap();
        writer.persist_placement(1, Some(0), Vec2::new(111.0, 222.0));
        writer.persist_placement(3, Some(1), Vec2::new(7.5, 8.5));
        assert_eq!(writer.pending(), 2);
        writer.shutdown().unwrap();
        let c = load(&path).unwrap();
        assert_eq!(c.resources[&1].local_pos, Vec2::new(111.0, 222.0));
        assert_eq!(c.resources[&3].host_device, Some(1));
    }

    #[test]
    fn writer_flushes_on_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.db");
        let mut store = Store::open(&path).unwrap();
        store.import(&fixture()).unwrap();
        let writer = PlacementWriter::start(&path, Duration::from_millis(50)).unwrap();
        writer.persist_placement(1, Some(0), Vec2::new(1.0, 2.0));
        std::thread::sleep(Duration::from_millis(300));
        assert_eq!(store.placement(1).unwrap().unwrap().local_pos, Vec2::new(1.0, 2.0));
        drop(writer);
    }

    #[test]
    fn fixture_validation() {
        assert!(Fixture::from_json(r#"{"resources":[{"resource_id":1,"text":"a"},{"resource_id":1,"text":"b"}]}"#).is_err());
        assert!(Fixture::from_json(r#"{"resources":[{"resource_id":1,"text":"a"}],"relations":[{"a":1,"b":4,"kind":"reference"}]}"#).is_err());
        assert!(Fixture::from_json(r#"{"resources":[]}"#).is_ok());
    }
}
