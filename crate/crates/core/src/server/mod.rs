//! The coordinating process.
//!
//! Task layout: one event loop owns the [`InteractionModel`], the store
//! writer and the event log; one task per device connection decodes
//! messages into the loop's queue and drains that device's outbound
//! queue; one ingest task feeds tracking frames. Nothing but the event
//! loop touches model state.

pub mod bridge;
pub mod config;
pub mod eventlog;
pub mod outbound;

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::geometry::ScreenSpec;
use crate::model::InteractionModel;
use crate::protocol::{encode, DeviceMessage, LineReader, ScreenSnapshot, ServerCommand, TrackingFrame};
use crate::store::{Fixture, PlacementWriter, Store, StoreError};
use crate::tracking::{frame_to_poses, ingest_loop, FeedMode, FrameQueue, IngestOptions, IngestStats};
use crate::{Addressed, DeviceId};

pub use config::{DeviceEntry, ServerConfig};
pub use eventlog::{replay, replay_file, EventLog, LogEvent, LogLine, ReplayError};
pub use outbound::{OutboundQueue, OUTBOUND_CAPACITY};

pub const HELLO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServerError {
    /// Process exit status for startup failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServerError::BindFailure { .. } => 2,
            ServerError::Store(_) => 3,
            ServerError::ConfigInvalid(_) => 4,
            ServerError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub config: ServerConfig,
    pub listen: SocketAddr,
    pub tracking: Option<SocketAddr>,
    pub tracking_mode: FeedMode,
    pub db: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub seed: Option<Fixture>,
    pub web_bridge: Option<SocketAddr>,
    pub hello_timeout: Duration,
}

impl ServerOptions {
    pub fn new(config: ServerConfig, listen: SocketAddr) -> Self {
        Self {
            config,
            listen,
            tracking: None,
            tracking_mode: FeedMode::Poll,
            db: None,
            log: None,
            seed: None,
            web_bridge: None,
            hello_timeout: HELLO_TIMEOUT,
        }
    }
}

/// Server-side view used by tests and the debug dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerSnapshot {
    pub state_json: String,
    pub screens: BTreeMap<DeviceId, ScreenSnapshot>,
    pub online: BTreeSet<DeviceId>,
    pub last_frame_t_ms: Option<u64>,
}

#[derive(Clone)]
struct Session {
    id: u64,
    out: Arc<OutboundQueue>,
}

enum Event {
    Hello {
        device: DeviceId,
        screen: ScreenSpec,
        session: Session,
        reply: oneshot::Sender<Result<(), String>>,
    },
    Message {
        device: DeviceId,
        session_id: u64,
        msg: DeviceMessage,
    },
    Closed {
        device: DeviceId,
        session_id: u64,
        reason: String,
    },
    Query(oneshot::Sender<ServerSnapshot>),
    Shutdown,
}

struct EventLoop {
    model: InteractionModel,
    sessions: BTreeMap<DeviceId, Session>,
    log: EventLog,
    writer: Option<PlacementWriter>,
    body_map: BTreeMap<u32, DeviceId>,
    last_frame_t: Option<u64>,
}

impl EventLoop {
    fn dispatch(&mut self, cmds: Vec<Addressed>) {
        for a in cmds {
            self.send(a.device, a.command);
        }
    }

    fn send(&mut self, device: DeviceId, cmd: ServerCommand) {
        let delivered = match self.sessions.get(&device) {
            Some(s) => {
                s.out.push(cmd.clone());
                true
            }
            None => false,
        };
        self.log.record(LogEvent::Outbound { device, cmd, delivered });
    }

    fn persist(&self, resource: crate::ResourceId) {
        let (Some(w), Some(r)) = (&self.writer, self.model.state().resources.get(&resource)) else {
            return;
        };
        w.persist_placement(resource, r.host_device, r.local_pos);
    }

    fn snapshot(&self) -> ServerSnapshot {
        ServerSnapshot {
            state_json: self.model.state_json(),
            screens: self
                .model
                .state()
                .screens
                .keys()
                .map(|d| (*d, self.model.screen_snapshot(*d)))
                .collect(),
            online: self.sessions.keys().copied().collect(),
            last_frame_t_ms: self.last_frame_t,
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Hello { device, screen, session, reply } => {
                let verdict = match self.model.state().screens.get(&device) {
                    None => Err(format!("device {device} is not registered")),
                    Some(_) if self.sessions.contains_key(&device) => {
                        Err(format!("device {device} is already connected"))
                    }
                    Some(registered) => {
                        if *registered != screen {
                            warn!("device {device} reports a screen differing from the registry; using the registry");
                        }
                        Ok(())
                    }
                };
                match verdict {
                    Ok(()) => {
                        info!("device {device} connected");
                        self.log.record(LogEvent::Session { device, event: "connected".into() });
                        self.sessions.insert(device, session);
                        for cmd in self.model.restore_commands(device) {
                            self.send(device, cmd);
                        }
                        let _ = reply.send(Ok(()));
                    }
                    Err(msg) => {
                        warn!("rejecting hello: {msg}");
                        self.log.record(LogEvent::Rejected { device: Some(device), error: msg.clone() });
                        let _ = reply.send(Err(msg));
                    }
                }
            }
            Event::Message { device, session_id, msg } => {
                if self.sessions.get(&device).map(|s| s.id) != Some(session_id) {
                    return;
                }
                self.log.record(LogEvent::Inbound { device, msg: msg.clone() });
                match msg {
                    DeviceMessage::Ping { seq } => {
                        self.send(device, ServerCommand::Pong { seq, frame_t_ms: self.last_frame_t });
                    }
                    DeviceMessage::DumpState => {
                        let screen = self.model.screen_snapshot(device);
                        self.send(device, ServerCommand::StateDump { device_id: device, screen });
                    }
                    DeviceMessage::Hello { .. } => {}
                    _ => match self.model.apply(device, &msg) {
                        Ok(cmds) => {
                            if let DeviceMessage::Moved { resource_id, .. } | DeviceMessage::Thrown { resource_id, .. } =
                                msg
                            {
                                self.persist(resource_id);
                            }
                            self.dispatch(cmds);
                        }
                        Err(e) => {
                            debug!("device {device}: {e}");
                            self.log.record(LogEvent::Rejected { device: Some(device), error: e.to_string() });
                            self.send(device, ServerCommand::Error { message: e.to_string() });
                            // The client already hid a thrown note; put it back.
                            if let DeviceMessage::Thrown { resource_id, .. } = msg {
                                if let Some(r) = self.model.state().resources.get(&resource_id) {
                                    if r.host_device == Some(device) {
                                        let (x_px, y_px) = (r.local_pos.x, r.local_pos.y);
                                        self.send(device, ServerCommand::Show { resource_id, x_px, y_px });
                                    }
                                }
                            }
                        }
                    },
                }
            }
            Event::Closed { device, session_id, reason } => {
                if self.sessions.get(&device).map(|s| s.id) == Some(session_id) {
                    info!("device {device} disconnected: {reason}");
                    if let Some(s) = self.sessions.remove(&device) {
                        s.out.close();
                    }
                    self.log.record(LogEvent::Session { device, event: format!("disconnected: {reason}") });
                }
            }
            Event::Query(reply) => {
                let _ = reply.send(self.snapshot());
            }
            Event::Shutdown => {}
        }
    }

    fn handle_frame(&mut self, frame: TrackingFrame) {
        self.last_frame_t = Some(self.last_frame_t.map_or(frame.t_ms, |t| t.max(frame.t_ms)));
        let poses = frame_to_poses(&frame, &self.body_map);
        if poses.is_empty() {
            return;
        }
        self.log.record(LogEvent::Frame { frame_t_ms: frame.t_ms, poses: poses.clone() });
        match self.model.on_pose_frame(&poses) {
            Ok(cmds) => self.dispatch(cmds),
            Err(e) => {
                warn!("pose frame rejected: {e}");
                self.log.record(LogEvent::Rejected { device: None, error: e.to_string() });
            }
        }
    }

    async fn run(mut self, mut rx: mpsc::Receiver<Event>, frames: Arc<FrameQueue>) -> Result<String, ServerError> {
        loop {
            tokio::select! {
                ev = rx.recv() => match ev {
                    None | Some(Event::Shutdown) => break,
                    Some(ev) => self.handle(ev),
                },
                frame = frames.pop() => self.handle_frame(frame),
            }
            self.log.flush();
        }
        for (_, s) in std::mem::take(&mut self.sessions) {
            s.out.close();
        }
        if let Some(w) = self.writer.take() {
            w.shutdown()?;
        }
        self.log.flush();
        Ok(self.model.state_json())
    }
}

fn build_model(opts: &ServerOptions) -> Result<(InteractionModel, Option<PlacementWriter>), ServerError> {
    let cfg = &opts.config;
    let mut model = InteractionModel::new(cfg.model_config());
    for d in &cfg.devices {
        model
            .register_device(d.device_id, d.screen)
            .map_err(|e| ServerError::ConfigInvalid(e.to_string()))?;
    }
    let Some(path) = &opts.db else {
        if let Some(seed) = &opts.seed {
            load_contents(&mut model, seed.resources.iter().map(|r| r.to_resource()), seed.all_relations());
        }
        return Ok((model, None));
    };
    let mut store = Store::open(path)?;
    for d in &cfg.devices {
        store.upsert_device(d.device_id, &d.screen)?;
    }
    if let Some(seed) = &opts.seed {
        store.import(seed)?;
    }
    let contents = store.load()?;
    load_contents(&mut model, contents.resources.into_values(), contents.relations);
    drop(store);
    let writer = PlacementWriter::start(path, cfg.flush_interval())?;
    Ok((model, Some(writer)))
}

fn load_contents(
    model: &mut InteractionModel,
    resources: impl IntoIterator<Item = crate::Resource>,
    relations: impl IntoIterator<Item = crate::Relation>,
) {
    for mut r in resources {
        match r.host_device.and_then(|h| model.state().screens.get(&h).copied()) {
            Some(screen) => r.local_pos = screen.clamp_px(r.local_pos),
            None if r.host_device.is_some() => {
                warn!("resource {} is hosted on an unregistered device; hiding it", r.resource_id);
                r.host_device = None;
            }
            None => {}
        }
        let id = r.resource_id;
        if let Err(e) = model.insert_resource(r) {
            warn!("skipping resource {id}: {e}");
        }
    }
    for rel in relations {
        if let Err(e) = model.add_relation(rel) {
            warn!("skipping relation: {e}");
        }
    }
}

async fn writer_task(mut wr: OwnedWriteHalf, out: Arc<OutboundQueue>) {
    while let Some(batch) = out.next_batch().await {
        let mut buf = Vec::new();
        for cmd in &batch {
            buf.extend_from_slice(&encode(cmd));
        }
        if wr.write_all(&buf).await.is_err() {
            out.close();
            break;
        }
    }
    let _ = wr.shutdown().await;
}

async fn session_task(
    stream: TcpStream,
    events: mpsc::Sender<Event>,
    hello_timeout: Duration,
    ids: Arc<AtomicU64>,
    mut shutdown: watch::Receiver<bool>,
) {
    stream.set_nodelay(true).ok();
    let peer = stream.peer_addr().ok();
    let (rd, wr) = stream.into_split();
    let mut reader = LineReader::new(rd);
    let out = Arc::new(OutboundQueue::default());
    let writer = tokio::spawn(writer_task(wr, out.clone()));
    let reject = |out: &OutboundQueue, message: String| {
        warn!("closing connection from {peer:?}: {message}");
        out.push(ServerCommand::Error { message });
        out.close();
    };

    let (device, screen) = match tokio::time::timeout(hello_timeout, reader.next_message::<DeviceMessage>()).await {
        Ok(Ok(Some(DeviceMessage::Hello { device_id, screen }))) => (device_id, screen),
        Ok(Ok(Some(_))) => {
            reject(&out, "expected hello".into());
            let _ = writer.await;
            return;
        }
        Ok(Ok(None)) => {
            out.close();
            let _ = writer.await;
            return;
        }
        Ok(Err(e)) => {
            reject(&out, format!("protocol error: {e}"));
            let _ = writer.await;
            return;
        }
        Err(_) => {
            reject(&out, "hello timeout".into());
            let _ = writer.await;
            return;
        }
    };

    let id = ids.fetch_add(1, Ordering::Relaxed);
    let (tx, rx) = oneshot::channel();
    let session = Session { id, out: out.clone() };
    if events.send(Event::Hello { device, screen, session, reply: tx }).await.is_err() {
        return;
    }
    match rx.await {
        Ok(Ok(())) => {}
        Ok(Err(msg)) => {
            reject(&out, msg);
            let _ = writer.await;
            return;
        }
        Err(_) => return,
    }

    let reason = loop {
        let next = tokio::select! {
            _ = shutdown.changed() => break "server shutdown".to_string(),
            next = reader.next_message::<DeviceMessage>() => next,
        };
        match next {
            Ok(Some(DeviceMessage::Hello { .. })) => {
                out.push(ServerCommand::Error { message: "protocol error: repeated hello".into() });
                break "repeated hello".to_string();
            }
            Ok(Some(msg)) => {
                if events.send(Event::Message { device, session_id: id, msg }).await.is_err() {
                    break "server shutdown".to_string();
                }
            }
            Ok(None) => break "connection closed".to_string(),
            Err(e) => {
                out.push(ServerCommand::Error { message: format!("protocol error: {e}") });
                break format!("protocol error: {e}");
            }
        }
    };
    let _ = events.send(Event::Closed { device, session_id: id, reason }).await;
    out.close();
    let _ = writer.await;
}

async fn accept_loop(
    listener: TcpListener,
    events: mpsc::Sender<Event>,
    hello_timeout: Duration,
    mut shutdown: watch::Receiver<bool>,
) {
    let ids = Arc::new(AtomicU64::new(1));
    loop {
        let accepted = tokio::select! {
            _ = shutdown.changed() => return,
            a = listener.accept() => a,
        };
        match accepted {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                tokio::spawn(session_task(stream, events.clone(), hello_timeout, ids.clone(), shutdown.clone()));
            }
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

/// A running server.
pub struct ServerHandle {
    local_addr: SocketAddr,
    bridge_addr: Option<SocketAddr>,
    events: mpsc::Sender<Event>,
    frames: Arc<FrameQueue>,
    shutdown: watch::Sender<bool>,
    event_loop: JoinHandle<Result<String, ServerError>>,
    tasks: Vec<JoinHandle<()>>,
    pub ingest_stats: Arc<IngestStats>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn bridge_addr(&self) -> Option<SocketAddr> {
        self.bridge_addr
    }

    /// Injects a tracking frame as if it came from the feed.
    pub fn push_frame(&self, frame: TrackingFrame) {
        self.frames.push(frame);
    }

    pub async fn snapshot(&self) -> Option<ServerSnapshot> {
        let (tx, rx) = oneshot::channel();
        self.events.send(Event::Query(tx)).await.ok()?;
        rx.await.ok()
    }

    /// Stops every task, flushes the store and returns the final model
    /// state as canonical JSON.
    pub async fn shutdown(self) -> Result<String, ServerError> {
        let _ = self.shutdown.send(true);
        let _ = self.events.send(Event::Shutdown).await;
        let state = self
            .event_loop
            .await
            .map_err(|e| ServerError::Io(std::io::Error::other(e.to_string())))??;
        for t in self.tasks {
            let _ = t.await;
        }
        Ok(state)
    }
}

/// Binds, loads the store and spawns all server tasks.
pub async fn start(opts: ServerOptions) -> Result<ServerHandle, ServerError> {
    opts.config.validate()?;
    let (model, writer) = build_model(&opts)?;
    let listener = TcpListener::bind(opts.listen)
        .await
        .map_err(|source| ServerError::BindFailure { addr: opts.listen, source })?;
    let local_addr = listener.local_addr()?;
    let bridge_listener = match opts.web_bridge {
        Some(addr) => Some(
            TcpListener::bind(addr)
                .await
                .map_err(|source| ServerError::BindFailure { addr, source })?,
        ),
        None => None,
    };
    let bridge_addr = bridge_listener.as_ref().map(|l| l.local_addr()).transpose()?;

    let mut log = match &opts.log {
        Some(path) => EventLog::create(path)?,
        None => EventLog::disabled(),
    };
    log.record(LogEvent::Header {
        version: eventlog::LOG_VERSION,
        config: *model.config(),
        state: model.state().clone(),
    });
    log.flush();

    let (events_tx, events_rx) = mpsc::channel(4096);
    let frames = Arc::new(FrameQueue::new(1));
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let ingest_stats = Arc::new(IngestStats::default());

    let event_loop = EventLoop {
        model,
        sessions: BTreeMap::new(),
        log,
        writer,
        body_map: opts.config.body_map(),
        last_frame_t: None,
    };
    let event_loop = tokio::spawn(event_loop.run(events_rx, frames.clone()));

    let mut tasks = vec![tokio::spawn(accept_loop(
        listener,
        events_tx.clone(),
        opts.hello_timeout,
        shutdown_rx.clone(),
    ))];
    if let Some(endpoint) = opts.tracking {
        let ingest = IngestOptions {
            mode: opts.tracking_mode,
            poll_interval: opts.config.poll_interval(),
            ..IngestOptions::default()
        };
        tasks.push(tokio::spawn(ingest_loop(
            endpoint,
            ingest,
            frames.clone(),
            ingest_stats.clone(),
            shutdown_rx.clone(),
        )));
    }
    if let Some(l) = bridge_listener {
        tasks.push(tokio::spawn(bridge::serve_bridge(l, local_addr, frames.clone(), shutdown_rx.clone())));
    }
    info!("listening on {local_addr}");
    Ok(ServerHandle {
        local_addr,
        bridge_addr,
        events: events_tx,
        frames,
        shutdown: shutdown_tx,
        event_loop,
        tasks,
        ingest_stats,
    })
}

/// Serves until Ctrl-C, then shuts down cleanly.
pub async fn run(opts: ServerOptions) -> Result<(), ServerError> {
    let handle = start(opts).await?;
    tokio::signal::ctrl_c().await?;
    info!("shutting down");
    handle.shutdown().await?;
    Ok(())
}
