//! Headless device clients and the deterministic scenario runner.
//!
//! A scenario is played in steps. Each step time is either a gesture time
//! or a keyframe time of the motion script. At every step the runner
//! advances the tracking clock, waits until the server reports having
//! applied a frame at least that new, then performs the step's gestures.
//! After each action every client pings the server and waits for the
//! answer, so the command log is cut at the same points on every run.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::geometry::{local_to_global, pose_to_transform, ScreenSpec, Vec2, Vec3};
use crate::model::DEFAULT_THROW_THRESHOLD_PX_S;
use crate::protocol::{
    write_message, DeviceMessage, LineReader, PointLine, ScreenSnapshot, ServerCommand,
};
use crate::server::DeviceEntry;
use crate::tracking::{frame_to_poses, serve_script, FeedMode, MotionScript, ScriptSource, SourceClock};
use crate::{DeviceId, ResourceId};

pub const BARRIER_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot connect to {addr}: {source}")]
    ConnectionRefused { addr: SocketAddr, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("device {0}: connection closed by server")]
    Disconnected(DeviceId),
    #[error("device {device}: timed out waiting for {what}")]
    Timeout { device: DeviceId, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Scripts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureAction {
    Move,
    Click,
    LongClick,
    Flick,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GestureParams {
    /// Drag samples in screen pixels, for `move`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vx_px_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vy_px_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gesture {
    pub t_ms: u64,
    pub device_id: DeviceId,
    pub action: GestureAction,
    pub resource_id: ResourceId,
    #[serde(default)]
    pub params: GestureParams,
}

fn default_threshold() -> f64 {
    DEFAULT_THROW_THRESHOLD_PX_S
}

/// Devices, their motion and the gestures performed on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub devices: Vec<DeviceEntry>,
    #[serde(default)]
    pub motion: Option<MotionScript>,
    #[serde(default = "default_threshold")]
    pub throw_threshold_px_s: f64,
    pub gestures: Vec<Gesture>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.throw_threshold_px_s.is_finite() && self.throw_threshold_px_s > 0.0) {
            return bad("throw threshold must be positive".into());
        }
        let mut screens = BTreeMap::new();
        for d in &self.devices {
            if !d.screen.is_valid() {
                return bad(format!("device {} has an invalid screen", d.device_id));
            }
            if screens.insert(d.device_id, d.screen).is_some() {
                return bad(format!("device {} listed twice", d.device_id));
            }
        }
        if let Some(m) = &self.motion {
            m.validate().map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        }
        if self.gestures.windows(2).any(|w| w[0].t_ms > w[1].t_ms) {
            return bad("gestures are not sorted by t_ms".into());
        }
        for (i, g) in self.gestures.iter().enumerate() {
            let Some(screen) = screens.get(&g.device_id) else {
                return bad(format!("gesture {i} targets unknown device {}", g.device_id));
            };
            match g.action {
                GestureAction::Move => {
                    if g.params.path.is_empty() {
                        return bad(format!("gesture {i}: move needs a path"));
                    }
                    let inside = g.params.path.iter().all(|[x, y]| screen.contains_px(Vec2::new(*x, *y)));
                    if !inside {
                        return bad(format!("gesture {i}: path leaves the screen"));
                    }
                }
                GestureAction::Flick => {
                    let ok = matches!((g.params.vx_px_s, g.params.vy_px_s), (Some(x), Some(y)) if x.is_finite() && y.is_finite());
                    if !ok {
                        return bad(format!("gesture {i}: flick needs finite vx_px_s and vy_px_s"));
                    }
                }
                GestureAction::Click | GestureAction::LongClick => {}
            }
        }
        Ok(())
    }

    pub fn screens(&self) -> BTreeMap<DeviceId, ScreenSpec> {
        self.devices.iter().map(|d| (d.device_id, d.screen)).collect()
    }

    /// Every time at which something happens, in order.
    pub fn step_times(&self) -> BTreeSet<u64> {
        let mut t: BTreeSet<u64> = self.gestures.iter().map(|g| g.t_ms).collect();
        if let Some(m) = &self.motion {
            t.extend(m.keyframe_times());
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assertion {
    /// Number of logged commands of one type, optionally for one device
    /// and one `on` value.
    CommandCount {
        command: String,
        #[serde(default)]
        device: Option<DeviceId>,
        #[serde(default)]
        on: Option<bool>,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
    /// The device showing a resource at the end, or none.
    ResourceHost { resource_id: ResourceId, device: Option<DeviceId> },
    ScreenContains {
        device: DeviceId,
        resource_id: ResourceId,
        #[serde(default)]
        highlighted: Option<bool>,
    },
    /// Every cross-device segment, lifted to table coordinates, lies on the
    /// line joining its resource to a resource on another device.
    SegmentCollinearity {
        tolerance_mm: f64,
        #[serde(default = "two")]
        min_segments: usize,
    },
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionFile {
    pub assertions: Vec<Assertion>,
}

impl AssertionFile {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Client side screen state

/// What one device displays, built only from received commands and the
/// device's own drags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScreenModel {
    pub defs: BTreeMap<ResourceId, (String, bool)>,
    pub visible: BTreeMap<ResourceId, Vec2>,
    pub highlighted: BTreeSet<ResourceId>,
    pub lines_local: BTreeSet<(ResourceId, ResourceId)>,
    pub lines_to_point: Vec<PointLine>,
}

impl ScreenModel {
    pub fn apply(&mut self, cmd: &ServerCommand) {
        match *cmd {
            ServerCommand::ResourceDef { resource_id, ref text, has_timestamp } => {
                self.defs.insert(resource_id, (text.clone(), has_timestamp));
            }
            ServerCommand::Show { resource_id, x_px, y_px } => {
                self.visible.insert(resource_id, Vec2::new(x_px, y_px));
            }
            ServerCommand::Hide { resource_id } => {
                self.visible.remove(&resource_id);
            }
            ServerCommand::Highlight { resource_id, on } => {
                if on {
                    self.highlighted.insert(resource_id);
                } else {
                    self.highlighted.remove(&resource_id);
                }
            }
            ServerCommand::LineLocal { from_resource, to_resource, on } => {
                if on {
                    self.lines_local.insert((from_resource, to_resource));
                } else {
                    self.lines_local.remove(&(from_resource, to_resource));
                }
            }
            ServerCommand::LineToPoint { resource_id, x_px, y_px, on } => {
                let line = PointLine { resource_id, x_px, y_px };
                let existing = self.lines_to_point.iter().position(|l| *l == line);
                match (on, existing) {
                    (true, None) => self.lines_to_point.push(line),
                    (false, Some(i)) => {
                        self.lines_to_point.remove(i);
                    }
                    _ => {}
                }
            }
            ServerCommand::Error { .. } | ServerCommand::Pong { .. } | ServerCommand::StateDump { .. } => {}
        }
    }

    /// A local drag: the note follows the finger.
    pub fn drag_to(&mut self, id: ResourceId, p: Vec2) {
        if let Some(pos) = self.visible.get_mut(&id) {
            *pos = p;
        }
    }

    pub fn snapshot(&self) -> ScreenSnapshot {
        let mut s = ScreenSnapshot {
            resources: self.visible.clone(),
            highlighted: self.highlighted.clone(),
            lines_local: self.lines_local.clone(),
            lines_to_point: self.lines_to_point.clone(),
        };
        s.sort_lines();
        s
    }
}

// ---------------------------------------------------------------------------
// Device client

/// One simulated device connection.
pub struct DeviceClient {
    pub device_id: DeviceId,
    pub screen: ScreenSpec,
    pub throw_threshold_px_s: f64,
    pub model: ScreenModel,
    writer: OwnedWriteHalf,
    inbox: mpsc::UnboundedReceiver<ServerCommand>,
    reader: JoinHandle<()>,
    /// Rendering commands received but not yet taken by the runner.
    unlogged: Vec<ServerCommand>,
    next_seq: u64,
    timeout: Duration,
}

impl DeviceClient {
    pub async fn connect(
        addr: SocketAddr,
        device_id: DeviceId,
        screen: ScreenSpec,
        throw_threshold_px_s: f64,
    ) -> Result<Self, SimError> {
        let stream = TcpStream::connect(addr)
            .await
            .map_err(|source| SimError::ConnectionRefused { addr, source })?;
        stream.set_nodelay(true).ok();
        let (rd, writer) = stream.into_split();
        let (tx, inbox) = mpsc::unbounded_channel();
        let reader = tokio::spawn(async move {
            let mut lines = LineReader::new(rd);
            loop {
                match lines.next_message::<ServerCommand>().await {
                    Ok(Some(cmd)) => {
                        if tx.send(cmd).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::warn!("device {device_id}: {e}");
                        break;
                    }
                }
            }
        });
        let mut client = Self {
            device_id,
            screen,
            throw_threshold_px_s,
            model: ScreenModel::default(),
            writer,
            inbox,
            reader,
            unlogged: Vec::new(),
            next_seq: 1,
            timeout: BARRIER_TIMEOUT,
        };
        client.send(&DeviceMessage::Hello { device_id, screen }).await?;
        Ok(client)
    }

    pub async fn send(&mut self, msg: &DeviceMessage) -> Result<(), SimError> {
        write_message(&mut self.writer, msg).await?;
        Ok(())
    }

    /// One `moved` per path sample.
    pub async fn drag(&mut self, id: ResourceId, path: &[Vec2]) -> Result<(), SimError> {
        for p in path {
            self.send(&DeviceMessage::Moved { resource_id: id, x_px: p.x, y_px: p.y }).await?;
            self.model.drag_to(id, *p);
        }
        Ok(())
    }

    pub async fn click(&mut self, id: ResourceId) -> Result<(), SimError> {
        self.send(&DeviceMessage::Clicked { resource_id: id }).await
    }

    pub async fn long_click(&mut self, id: ResourceId) -> Result<(), SimError> {
        self.send(&DeviceMessage::LongClicked { resource_id: id }).await
    }

    /// Sends `thrown` when the swipe is fast enough, otherwise ends the drag
    /// with a `moved` at the note's current position.
    pub async fn flick(&mut self, id: ResourceId, v: Vec2) -> Result<(), SimError> {
        if v.norm() >= self.throw_threshold_px_s {
            return self.send(&DeviceMessage::Thrown { resource_id: id, vx_px_s: v.x, vy_px_s: v.y }).await;
        }
        match self.model.visible.get(&id).copied() {
            Some(p) => self.send(&DeviceMessage::Moved { resource_id: id, x_px: p.x, y_px: p.y }).await,
            None => Ok(()),
        }
    }

    async fn recv(&mut self, what: &str) -> Result<ServerCommand, SimError> {
        match tokio::time::timeout(self.timeout, self.inbox.recv()).await {
            Ok(Some(cmd)) => Ok(cmd),
            Ok(None) => Err(SimError::Disconnected(self.device_id)),
            Err(_) => Err(SimError::Timeout { device: self.device_id, what: what.into() }),
        }
    }

    fn absorb(&mut self, cmd: ServerCommand) {
        self.model.apply(&cmd);
        self.unlogged.push(cmd);
    }

    /// Round trip to the server. Returns the newest tracking frame time it
    /// has applied. Everything the server queued for this device before
    /// answering has been absorbed when this returns.
    pub async fn ping(&mut self) -> Result<Option<u64>, SimError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.send(&DeviceMessage::Ping { seq }).await?;
        loop {
            match self.recv("pong").await? {
                ServerCommand::Pong { seq: s, frame_t_ms } if s == seq => return Ok(frame_t_ms),
                ServerCommand::Pong { .. } | ServerCommand::StateDump { .. } => {}
                cmd => self.absorb(cmd),
            }
        }
    }

    /// The server's view of this screen.
    pub async fn dump(&mut self) -> Result<ScreenSnapshot, SimError> {
        self.send(&DeviceMessage::DumpState).await?;
        loop {
            match self.recv("state dump").await? {
                ServerCommand::StateDump { screen, .. } => return Ok(screen),
                ServerCommand::Pong { .. } => {}
                cmd => self.absorb(cmd),
            }
        }
    }

    /// Rendering commands received since the last call.
    pub fn take_unlogged(&mut self) -> Vec<ServerCommand> {
        std::mem::take(&mut self.unlogged)
    }

    /// Drops the connection without a goodbye, like a crashed tablet.
    pub fn kill(self) {
        self.reader.abort();
    }
}

impl Drop for DeviceClient {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

// ---------------------------------------------------------------------------
// Clocks and tracking

/// Scenario time.
#[derive(Debug, Clone)]
pub enum SimClock {
    /// Jumps straight to each step.
    Virtual(Arc<AtomicU64>),
    /// Sleeps until each step is due.
    Wall(Instant),
}

impl SimClock {
    async fn advance_to(&self, t_ms: u64) {
        match self {
            SimClock::Virtual(t) => t.store(t_ms, Ordering::SeqCst),
            SimClock::Wall(start) => {
                tokio::time::sleep_until((*start + Duration::from_millis(t_ms)).into()).await
            }
        }
    }
}

/// A motion script served to the server's tracking ingest.
pub struct TrackingHost {
    pub addr: SocketAddr,
    pub clock: SimClock,
    task: JoinHandle<std::io::Result<()>>,
}

impl TrackingHost {
    pub fn start(listener: TcpListener, motion: MotionScript, mode: FeedMode, fast: bool) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let (source, clock) = if fast {
            let (source, t) = ScriptSource::virtual_clock(motion);
            (source, SimClock::Virtual(t))
        } else {
            let start = Instant::now();
            (ScriptSource { script: motion, clock: SourceClock::Wall(start) }, SimClock::Wall(start))
        };
        let task = tokio::spawn(serve_script(listener, Arc::new(source), mode));
        Ok(Self { addr, clock, task })
    }
}

impl Drop for TrackingHost {
    fn drop(&mut self) {
        self.task.abort();
    }
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, Serialize)]
struct LogEntry<'a> {
    step: usize,
    t_ms: u64,
    device: DeviceId,
    cmd: &'a ServerCommand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    /// One JSON line per received rendering command.
    pub log: String,
    pub commands: Vec<(usize, DeviceId, ServerCommand)>,
    pub screens: BTreeMap<DeviceId, ScreenSnapshot>,
    pub dumps: BTreeMap<DeviceId, ScreenSnapshot>,
    pub final_t_ms: u64,
    pub assertions: Vec<AssertionResult>,
    pub elapsed: Duration,
}

impl ScenarioReport {
    pub fn dumps_match(&self) -> bool {
        self.screens == self.dumps
    }

    pub fn passed(&self) -> bool {
        self.dumps_match() && self.assertions.iter().all(|a| a.passed)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub server: SocketAddr,
    /// Devices to simulate; all scenario devices when `None`.
    pub devices: Option<Vec<DeviceId>>,
    pub fast: bool,
}

struct Recorder {
    step: usize,
    log: String,
    commands: Vec<(usize, DeviceId, ServerCommand)>,
}

impl Recorder {
    fn take(&mut self, t_ms: u64, clients: &mut BTreeMap<DeviceId, DeviceClient>) {
        for (id, c) in clients.iter_mut() {
            for cmd in c.take_unlogged() {
                let line = serde_json::to_string(&LogEntry { step: self.step, t_ms, device: *id, cmd: &cmd })
                    .expect("log entries serialize");
                self.log.push_str(&line);
                self.log.push('\n');
                self.commands.push((self.step, *id, cmd));
            }
        }
        self.step += 1;
    }
}

async fn barrier(clients: &mut BTreeMap<DeviceId, DeviceClient>) -> Result<(), SimError> {
    for c in clients.values_mut() {
        c.ping().await?;
    }
    Ok(())
}

async fn wait_for_frame(client: &mut DeviceClient, t_ms: u64) -> Result<(), SimError> {
    let deadline = Instant::now() + BARRIER_TIMEOUT;
    loop {
        if client.ping().await?.is_some_and(|f| f >= t_ms) {
            return Ok(());
        }
        if Instant::now() > deadline {
            return Err(SimError::Timeout { device: client.device_id, what: format!("tracking frame at {t_ms} ms") });
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
}

/// Plays `scenario` against a running server. `tracking` must be the
/// source the server ingests from, if the scenario has motion.
pub async fn run_scenario(
    scenario: &Scenario,
    assertions: &[Assertion],
    tracking: Option<&TrackingHost>,
    opts: &RunOptions,
) -> Result<ScenarioReport, SimError> {
    scenario.validate()?;
    let started = Instant::now();
    let screens = scenario.screens();
    let selected: BTreeSet<DeviceId> = match &opts.devices {
        Some(ids) => ids.iter().copied().collect(),
        None => screens.keys().copied().collect(),
    };
    for id in &selected {
        if !screens.contains_key(id) {
            return Err(SimError::InvalidScenario(format!("device {id} is not in the scenario")));
        }
    }
    let clock = match tracking {
        Some(h) => h.clock.clone(),
        None if opts.fast => SimClock::Virtual(Arc::new(AtomicU64::new(0))),
        None => SimClock::Wall(Instant::now()),
    };
    let follow_frames = tracking.is_some() && scenario.motion.is_some();

    let mut rec = Recorder { step: 0, log: String::new(), commands: Vec::new() };
    let mut clients = BTreeMap::new();
    clock.advance_to(0).await;
    for id in &selected {
        let mut c = DeviceClient::connect(opts.server, *id, screens[id], scenario.throw_threshold_px_s).await?;
        c.ping().await?;
        clients.insert(*id, c);
        barrier(&mut clients).await?;
        rec.take(0, &mut clients);
    }

    let mut final_t = 0;
    for t in scenario.step_times() {
        final_t = t;
        clock.advance_to(t).await;
        if follow_frames {
            if let Some(c) = clients.values_mut().next() {
                wait_for_frame(c, t).await?;
            }
        }
        barrier(&mut clients).await?;
        rec.take(t, &mut clients);
        for g in scenario.gestures.iter().filter(|g| g.t_ms == t) {
            let Some(c) = clients.get_mut(&g.device_id) else { continue };
            match g.action {
                GestureAction::Move => {
                    let path: Vec<Vec2> = g.params.path.iter().map(|[x, y]| Vec2::new(*x, *y)).collect();
                    c.drag(g.resource_id, &path).await?;
                }
                GestureAction::Click => c.click(g.resource_id).await?,
                GestureAction::LongClick => c.long_click(g.resource_id).await?,
                GestureAction::Flick => {
                    let v = Vec2::new(g.params.vx_px_s.unwrap_or(0.0), g.params.vy_px_s.unwrap_or(0.0));
                    c.flick(g.resource_id, v).await?;
                }
            }
            c.ping().await?;
            barrier(&mut clients).await?;
            rec.take(t, &mut clients);
        }
    }

    let mut dumps = BTreeMap::new();
    for (id, c) in clients.iter_mut() {
        dumps.insert(*id, c.dump().await?);
    }
    barrier(&mut clients).await?;
    rec.take(final_t, &mut clients);
    let screens_now: BTreeMap<DeviceId, ScreenSnapshot> =
        clients.iter().map(|(id, c)| (*id, c.model.snapshot())).collect();

    let poses = final_poses(scenario, final_t);
    let results = assertions
        .iter()
        .map(|a| evaluate(a, &rec.commands, &screens_now, &screens, &poses))
        .collect();
    Ok(ScenarioReport {
        log: rec.log,
        commands: rec.commands,
        screens: screens_now,
        dumps,
        final_t_ms: final_t,
        assertions: results,
        elapsed: started.elapsed(),
    })
}

fn final_poses(scenario: &Scenario, t_ms: u64) -> BTreeMap<DeviceId, crate::geometry::DevicePose> {
    let Some(motion) = &scenario.motion else { return BTreeMap::new() };
    let body_map: BTreeMap<u32, DeviceId> = scenario.devices.iter().map(|d| (d.body(), d.device_id)).collect();
    frame_to_poses(&motion.frame_at(t_ms), &body_map)
        .into_iter()
        .map(|p| (p.device_id, p))
        .collect()
}

fn command_type(cmd: &ServerCommand) -> String {
    serde_json::to_value(cmd)
        .ok()
        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_owned))
        .unwrap_or_default()
}

fn command_on(cmd: &ServerCommand) -> Option<bool> {
    match *cmd {
        ServerCommand::Highlight { on, .. }
        | ServerCommand::LineLocal { on, .. }
        | ServerCommand::LineToPoint { on, .. } => Some(on),
        _ => None,
    }
}

fn distance_to_line(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let d = b - a;
    let n = d.norm();
    if n == 0.0 {
        return (p - a).norm();
    }
    (p - a).cross(d).norm() / n
}

struct Segment {
    device: DeviceId,
    start: Vec3,
    end: Vec3,
}

fn evaluate(
    a: &Assertion,
    commands: &[(usize, DeviceId, ServerCommand)],
    final_screens: &BTreeMap<DeviceId, ScreenSnapshot>,
    specs: &BTreeMap<DeviceId, ScreenSpec>,
    poses: &BTreeMap<DeviceId, crate::geometry::DevicePose>,
) -> AssertionResult {
    let description = serde_json::to_string(a).unwrap_or_default();
    let (passed, detail) = match a {
        Assertion::CommandCount { command, device, on, min, max } => {
            let n = commands
                .iter()
                .filter(|(_, d, c)| {
                    device.is_none_or(|x| x == *d) && command_type(c) == *command && on.is_none_or(|o| command_on(c) == Some(o))
                })
                .count();
            let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
            (ok, format!("counted {n}"))
        }
        Assertion::ResourceHost { resource_id, device } => {
            let hosts: Vec<DeviceId> = final_screens
                .iter()
                .filter(|(_, s)| s.resources.contains_key(resource_id))
                .map(|(d, _)| *d)
                .collect();
            let ok = match device {
                Some(d) => hosts == [*d],
                None => hosts.is_empty(),
            };
            (ok, format!("shown on {hosts:?}"))
        }
        Assertion::ScreenContains { device, resource_id, highlighted } => match final_screens.get(device) {
            None => (false, format!("device {device} not simulated")),
            Some(s) => {
                let shown = s.resources.contains_key(resource_id);
                let hl = s.highlighted.contains(resource_id);
                let ok = shown && highlighted.is_none_or(|h| h == hl);
                (ok, format!("shown={shown} highlighted={hl}"))
            }
        },
        Assertion::SegmentCollinearity { tolerance_mm, min_segments } => {
            collinearity(final_screens, specs, poses, *tolerance_mm, *min_segments)
        }
    };
    AssertionResult { description, passed, detail }
}

fn collinearity(
    final_screens: &BTreeMap<DeviceId, ScreenSnapshot>,
    specs: &BTreeMap<DeviceId, ScreenSpec>,
    poses: &BTreeMap<DeviceId, crate::geometry::DevicePose>,
    tolerance_mm: f64,
    min_segments: usize,
) -> (bool, String) {
    let mut segments = Vec::new();
    for (d, snap) in final_screens {
        let (Some(pose), Some(spec)) = (poses.get(d), specs.get(d)) else { continue };
        let t = pose_to_transform(pose);
        let lift = |p: Vec2| local_to_global(&t, spec.px_to_local_mm(p));
        for line in &snap.lines_to_point {
            let Some(start) = snap.resources.get(&line.resource_id) else {
                return (false, format!("device {d} draws from resource {} it does not show", line.resource_id));
            };
            segments.push(Segment { device: *d, start: lift(*start), end: lift(Vec2::new(line.x_px, line.y_px)) });
        }
    }
    if segments.len() < min_segments {
        return (false, format!("{} cross-device segments, need {min_segments}", segments.len()));
    }
    let mut worst = 0.0f64;
    for (i, s) in segments.iter().enumerate() {
        let best = segments
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && o.device != s.device)
            .map(|(_, o)| {
                [s.end, o.end]
                    .iter()
                    .map(|p| distance_to_line(*p, s.start, o.start))
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return (false, format!("segment {i} on device {} has no partner", s.device));
        }
        worst = worst.max(best);
    }
    (worst <= tolerance_mm, format!("{} segments, worst deviation {worst:.3e} mm", segments.len()))
}
