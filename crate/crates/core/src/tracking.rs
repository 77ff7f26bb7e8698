//! Tracking feed: a scripted pose source standing in for the camera
//! system, and the client loop that pulls frames from any source.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Notify};
use tokio::task::JoinSet;

use crate::geometry::{DevicePose, EulerAngles, Vec3};
use crate::protocol::{write_message, LineReader, ReadError, TrackedBody, TrackingFrame, TrackingMessage};
use crate::DeviceId;

pub const POLL_TIMEOUT: Duration = Duration::from_millis(500);
pub const RECONNECT_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("invalid motion script: {0}")]
    InvalidScript(String),
    #[error("tracking connection lost: {0}")]
    ConnectionLost(String),
    #[error("no frame within {0:?}")]
    Timeout(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    Poll,
    Stream,
}

impl FromStr for FeedMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "poll" => Ok(FeedMode::Poll),
            "stream" => Ok(FeedMode::Stream),
            other => Err(format!("unknown tracking mode `{other}` (expected poll or stream)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t_ms: u64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    #[serde(default)]
    pub roll_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub yaw_deg: f64,
}

/// Scripted device motion, keyed by tracked body id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub rate_hz: f64,
    #[serde(rename = "loop", default)]
    pub looping: bool,
    pub devices: BTreeMap<u32, Vec<Keyframe>>,
}

fn wrap_deg(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + (b - a) * f
}

fn lerp_angle(a: f64, b: f64, f: f64) -> f64 {
    wrap_deg(a + wrap_deg(b - a) * f)
}

impl MotionScript {
    pub fn from_json(text: &str) -> Result<Self, TrackingError> {
        let script: MotionScript =
            serde_json::from_str(text).map_err(|e| TrackingError::InvalidScript(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), TrackingError> {
        let bad = |m: String| Err(TrackingError::InvalidScript(m));
        if !(1.0..=240.0).contains(&self.rate_hz) {
            return bad(format!("rate {} Hz outside [1, 240]", self.rate_hz));
        }
        for (id, frames) in &self.devices {
            if frames.is_empty() {
                return bad(format!("body {id} has no keyframes"));
            }
            if frames.windows(2).any(|w| w[0].t_ms > w[1].t_ms) {
                return bad(format!("keyframes of body {id} are not sorted by time"));
            }
            let finite = frames.iter().all(|k| {
                [k.x_mm, k.y_mm, k.z_mm, k.roll_deg, k.pitch_deg, k.yaw_deg].iter().all(|v| v.is_finite())
            });
            if !finite {
                return bad(format!("body {id} has a non-finite keyframe"));
            }
        }
        Ok(())
    }

    /// Every keyframe time across all bodies.
    pub fn keyframe_times(&self) -> BTreeSet<u64> {
        self.devices.values().flatten().map(|k| k.t_ms).collect()
    }

    fn body_at(id: u32, frames: &[Keyframe], t_ms: u64, looping: bool) -> TrackedBody {
        let first = frames[0].t_ms;
        let last = frames[frames.len() - 1].t_ms;
        let mut t = t_ms.max(first);
        if looping && t > last && last > first {
            t = first + (t - first) % (last - first);
        }
        let idx = frames.partition_point(|k| k.t_ms <= t);
        let body = |k: &Keyframe| TrackedBody {
            id,
            x_mm: k.x_mm,
            y_mm: k.y_mm,
            z_mm: k.z_mm,
            roll_deg: wrap_deg(k.roll_deg),
            pitch_deg: wrap_deg(k.pitch_deg),
            yaw_deg: wrap_deg(k.yaw_deg),
        };
        if idx == 0 {
            return body(&frames[0]);
        }
        if idx == frames.len() {
            return body(&frames[frames.len() - 1]);
        }
        let (a, b) = (&frames[idx - 1], &frames[idx]);
        if a.t_ms == t || b.t_ms == a.t_ms {
            return body(a);
        }
        let f = (t - a.t_ms) as f64 / (b.t_ms - a.t_ms) as f64;
        TrackedBody {
            id,
            x_mm: lerp(a.x_mm, b.x_mm, f),
            y_mm: lerp(a.y_mm, b.y_mm, f),
            z_mm: lerp(a.z_mm, b.z_mm, f),
            roll_deg: lerp_angle(a.roll_deg, b.roll_deg, f),
            pitch_deg: lerp_angle(a.pitch_deg, b.pitch_deg, f),
            yaw_deg: lerp_angle(a.yaw_deg, b.yaw_deg, f),
        }
    }

    /// Poses of all bodies at `t_ms`. Positions interpolate linearly,
    /// angles along the shorter arc. Before the first keyframe a body holds
    /// its first pose; after the last it holds (or, looping, wraps).
    pub fn interpolate(&self, t_ms: u64) -> Vec<TrackedBody> {
        self.devices
            .iter()
            .map(|(id, frames)| Self::body_at(*id, frames, t_ms, self.looping))
            .collect()
    }

    pub fn frame_at(&self, t_ms: u64) -> TrackingFrame {
        TrackingFrame { t_ms, bodies: self.interpolate(t_ms) }
    }
}

/// Converts wire bodies into device poses. Bodies without a registered
/// device are skipped.
pub fn frame_to_poses(frame: &TrackingFrame, body_to_device: &BTreeMap<u32, DeviceId>) -> Vec<DevicePose> {
    frame
        .bodies
        .iter()
        .filter_map(|b| {
            let device = *body_to_device.get(&b.id)?;
            Some(DevicePose::new(
                device,
                Vec3::new(b.x_mm, b.y_mm, b.z_mm),
                EulerAngles::from_degrees(b.yaw_deg, b.pitch_deg, b.roll_deg),
                frame.t_ms,
            ))
        })
        .collect()
}

/// Time base of a scripted source.
#[derive(Debug, Clone)]
pub enum SourceClock {
    Wall(Instant),
    /// Advanced explicitly, for reproducible runs.
    Virtual(Arc<AtomicU64>),
}

impl SourceClock {
    pub fn now_ms(&self) -> u64 {
        match self {
            SourceClock::Wall(start) => start.elapsed().as_millis() as u64,
            SourceClock::Virtual(t) => t.load(Ordering::SeqCst),
        }
    }
}

/// Plays a motion script to tracking clients.
#[derive(Debug)]
pub struct ScriptSource {
    pub script: MotionScript,
    pub clock: SourceClock,
}

impl ScriptSource {
    pub fn wall(script: MotionScript) -> Self {
        Self { script, clock: SourceClock::Wall(Instant::now()) }
    }

    pub fn virtual_clock(script: MotionScript) -> (Self, Arc<AtomicU64>) {
        let t = Arc::new(AtomicU64::new(0));
        (Self { script, clock: SourceClock::Virtual(t.clone()) }, t)
    }

    pub fn current_frame(&self) -> TrackingFrame {
        self.script.frame_at(self.clock.now_ms())
    }
}

async fn serve_connection(stream: TcpStream, source: Arc<ScriptSource>, mode: FeedMode) -> Result<(), ReadError> {
    stream.set_nodelay(true).ok();
    let (rd, mut wr) = stream.into_split();
    match mode {
        FeedMode::Poll => {
            let mut reader = LineReader::new(rd);
            while let Some(msg) = reader.next_message::<TrackingMessage>().await? {
                if msg == TrackingMessage::Poll {
                    write_message(&mut wr, &TrackingMessage::Frame(source.current_frame())).await?;
                }
            }
        }
        FeedMode::Stream => {
            let period = Duration::from_secs_f64(1.0 / source.script.rate_hz);
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                write_message(&mut wr, &TrackingMessage::Frame(source.current_frame())).await?;
            }
        }
    }
    Ok(())
}

/// Serves the tracking protocol on `listener` until the returned future is
/// dropped or its task aborted; open connections go down with it.
pub async fn serve_script(listener: TcpListener, source: Arc<ScriptSource>, mode: FeedMode) -> std::io::Result<()> {
    let mut conns = JoinSet::new();
    loop {
        let (stream, peer) = listener.accept().await?;
        debug!("tracking client {peer} connected");
        let source = source.clone();
        conns.spawn(async move {
            if let Err(e) = serve_connection(stream, source, mode).await {
                debug!("tracking client {peer} gone: {e}");
            }
        });
        while conns.try_join_next().is_some() {}
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct QueueStats {
    pub pushed: u64,
    pub dropped: u64,
    pub max_len: usize,
}

#[derive(Debug)]
struct QueueInner {
    frames: VecDeque<TrackingFrame>,
    stats: QueueStats,
}

/// Bounded frame handoff. When full, the oldest pending frame is dropped so
/// the consumer always sees the freshest data.
#[derive(Debug)]
pub struct FrameQueue {
    inner: Mutex<QueueInner>,
    capacity: usize,
    notify: Notify,
}

impl FrameQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(QueueInner { frames: VecDeque::new(), stats: QueueStats::default() }),
            capacity: capacity.max(1),
            notify: Notify::new(),
        }
    }

    pub fn push(&self, frame: TrackingFrame) {
        let mut q = self.inner.lock().expect("frame queue poisoned");
        if q.frames.len() >= self.capacity {
            q.frames.pop_front();
            q.stats.dropped += 1;
        }
        q.frames.push_back(frame);
        q.stats.pushed += 1;
        q.stats.max_len = q.stats.max_len.max(q.frames.len());
        drop(q);
        self.notify.notify_one();
    }

    pub fn try_pop(&self) -> Option<TrackingFrame> {
        self.inner.lock().expect("frame queue poisoned").frames.pop_front()
    }

    pub async fn pop(&self) -> TrackingFrame {
        loop {
            if let Some(f) = self.try_pop() {
                return f;
            }
            self.notify.notified().await;
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("frame queue poisoned").frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> QueueStats {
        self.inner.lock().expect("frame queue poisoned").stats
    }
}

/// Counters exposed by the ingest loop.
#[derive(Debug, Default)]
pub struct IngestStats {
    pub connects: AtomicU64,
    pub connect_failures: AtomicU64,
    pub connection_lost: AtomicU64,
    pub timeouts: AtomicU64,
    pub frames: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub mode: FeedMode,
    pub poll_interval: Duration,
    pub poll_timeout: Duration,
    pub reconnect_backoff: Duration,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            mode: FeedMode::Poll,
            poll_interval: Duration::from_millis(10),
            poll_timeout: POLL_TIMEOUT,
            reconnect_backoff: RECONNECT_BACKOFF,
        }
    }
}

/// Keeps delivered frame times non-decreasing, including across a source
/// restart whose clock starts over.
#[derive(Debug, Default)]
struct FrameClock {
    last: Option<u64>,
    offset: u64,
    fresh_connection: bool,
}

impl FrameClock {
    fn admit(&mut self, mut frame: TrackingFrame) -> Option<TrackingFrame> {
        if let Some(last) = self.last {
            if self.fresh_connection && frame.t_ms + self.offset < last {
                self.offset = last - frame.t_ms;
            }
            self.fresh_connection = false;
            frame.t_ms += self.offset;
            if frame.t_ms < last {
                return None;
            }
        } else {
            self.fresh_connection = false;
        }
        self.last = Some(frame.t_ms);
        Some(frame)
    }
}

async fn ingest_session(
    stream: TcpStream,
    opts: &IngestOptions,
    queue: &FrameQueue,
    stats: &IngestStats,
    clock: &mut FrameClock,
    shutdown: &mut watch::Receiver<bool>,
) -> Result<(), TrackingError> {
    stream.set_nodelay(true).ok();
    let (rd, mut wr) = stream.into_split();
    let mut reader = LineReader::new(rd);
    let lost = |e: &dyn std::fmt::Display| TrackingError::ConnectionLost(e.to_string());
    loop {
        if *shutdown.borrow() {
            return Ok(());
        }
        if opts.mode == FeedMode::Poll {
            write_message(&mut wr, &TrackingMessage::Poll).await.map_err(|e| lost(&e))?;
        }
        let next = async {
            loop {
                match reader.next_message::<TrackingMessage>().await {
                    Ok(Some(TrackingMessage::Frame(f))) => return Ok(f),
                    Ok(Some(TrackingMessage::Poll)) => continue,
                    Ok(None) => return Err(lost(&"end of stream")),
                    Err(ReadError::Decode(e)) => warn!("dropping bad tracking line: {e}"),
                    Err(e) => return Err(lost(&e)),
                }
            }
        };
        let frame = tokio::select! {
            _ = shutdown.changed() => return Ok(()),
            r = async {
                if opts.mode == FeedMode::Poll {
                    tokio::time::timeout(opts.poll_timeout, next)
                        .await
                        .map_err(|_| TrackingError::Timeout(opts.poll_timeout))?
                } else {
                    next.await
                }
            } => r?,
        };
        if let Some(frame) = clock.admit(frame) {
            stats.frames.fetch_add(1, Ordering::Relaxed);
            queue.push(frame);
        }
        if opts.mode == FeedMode::Poll {
            tokio::select! {
                _ = shutdown.changed() => return Ok(()),
                _ = tokio::time::sleep(opts.poll_interval) => {}
            }
        }
    }
}

/// Pulls frames from the source at `endpoint` into `queue` until
/// `shutdown` flips to true. Lost connections and poll timeouts are
/// counted in `stats` and retried after the reconnect backoff.
pub async fn ingest_loop(
    endpoint: SocketAddr,
    opts: IngestOptions,
    queue: Arc<FrameQueue>,
    stats: Arc<IngestStats>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut clock = FrameClock::default();
    loop {
        if *shutdown.borrow() {
            return;
        }
        match TcpStream::connect(endpoint).await {
            Ok(stream) => {
                stats.connects.fetch_add(1, Ordering::Relaxed);
                info!("tracking connected to {endpoint} ({:?} mode)", opts.mode);
                clock.fresh_connection = true;
                match ingest_session(stream, &opts, &queue, &stats, &mut clock, &mut shutdown).await {
                    Ok(()) => return,
                    Err(e @ TrackingError::Timeout(_)) => {
                        stats.timeouts.fetch_add(1, Ordering::Relaxed);
                        warn!("{e}; reconnecting");
                    }
                    Err(e) => {
                        stats.connection_lost.fetch_add(1, Ordering::Relaxed);
                        warn!("{e}; reconnecting");
                    }
                }
            }
            Err(e) => {
                stats.connect_failures.fetch_add(1, Ordering::Relaxed);
                debug!("tracking connect to {endpoint} failed: {e}");
            }
        }
        tokio::select! {
            _ = shutdown.changed() => return,
            _ = tokio::time::sleep(opts.reconnect_backoff) => {}
        }
    }
}
