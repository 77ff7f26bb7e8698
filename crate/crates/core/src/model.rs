//! Server-side interaction model.
//!
//! [`InteractionModel`] owns the global picture of the table: where every
//! device is, which device hosts which resource, and what has been drawn
//! where. Each entry point consumes one device message or pose frame and
//! returns the batch of commands to send, addressed per device. The model
//! does no I/O and is fully deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    global_to_local, local_to_global, pose_to_transform, project_to_device, select_throw_target,
    throw_direction, DevicePose, Transform, Vec2, Vec3,
};
use crate::protocol::{DeviceMessage, PointLine, ScreenSnapshot, ServerCommand};
use crate::{DeviceId, ResourceId};

pub use crate::geometry::ScreenSpec;

/// Default flick speed above which a swipe counts as a throw.
pub const DEFAULT_THROW_THRESHOLD_PX_S: f64 = 1000.0;
/// Distance a thrown resource lands inside the target screen's edge.
pub const LANDING_MARGIN_PX: f64 = 40.0;
/// Line endpoints moving less than this are not re-sent.
pub const LINE_DAMPING_PX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("resource {resource} is not shown on device {device}")]
    WrongHost { resource: ResourceId, device: DeviceId },
    #[error("resource {0} carries no timestamp")]
    NoTemporalData(ResourceId),
    #[error("throw speed {speed:.1} px/s is below the {threshold:.1} px/s threshold")]
    BelowThreshold { speed: f64, threshold: f64 },
    #[error("invalid resource {0}: {1}")]
    InvalidResource(ResourceId, String),
    #[error("invalid relation: {0}")]
    InvalidRelation(String),
    #[error("invalid pose for device {0}")]
    InvalidPose(DeviceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Reference,
    Temporal,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Reference => "reference",
            RelationKind::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reference" => Some(RelationKind::Reference),
            "temporal" => Some(RelationKind::Temporal),
            _ => None,
        }
    }
}

/// A link between two resources. Reference relations are unordered and
/// always stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub a: ResourceId,
    pub b: ResourceId,
    pub kind: RelationKind,
}

impl Relation {
    pub fn new(a: ResourceId, b: ResourceId, kind: RelationKind) -> Result<Self, ModelError> {
        if a == b {
            return Err(ModelError::InvalidRelation(format!("resource {a} related to itself")));
        }
        let (a, b) = match kind {
            RelationKind::Reference if a > b => (b, a),
            _ => (a, b),
        };
        Ok(Self { a, b, kind })
    }

    pub fn reference(a: ResourceId, b: ResourceId) -> Result<Self, ModelError> {
        Self::new(a, b, RelationKind::Reference)
    }
}

/// One information item (a post-it note).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resource {
    pub resource_id: ResourceId,
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    /// Event time in minutes.
    #[serde(default)]
    pub timestamp: Option<i64>,
    /// `None` means hidden.
    #[serde(default)]
    pub host_device: Option<DeviceId>,
    /// Note center on the host screen, px.
    #[serde(default)]
    pub local_pos: Vec2,
}

/// A line the model has told some device to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineKey {
    /// Both ends on the same screen.
    Local { device: DeviceId, from: ResourceId, to: ResourceId },
    /// From `resource` toward `toward`, which lives on another device.
    ToPoint { device: DeviceId, resource: ResourceId, toward: ResourceId },
}

impl LineKey {
    pub fn device(&self) -> DeviceId {
        match *self {
            LineKey::Local { device, .. } | LineKey::ToPoint { device, .. } => device,
        }
    }

    fn command(&self, point: Option<Vec2>, on: bool) -> ServerCommand {
        match *self {
            LineKey::Local { from, to, .. } => ServerCommand::LineLocal {
                from_resource: from,
                to_resource: to,
                on,
            },
            LineKey::ToPoint { resource, .. } => {
                let p = point.unwrap_or_default();
                ServerCommand::LineToPoint { resource_id: resource, x_px: p.x, y_px: p.y, on }
            }
        }
    }
}

/// A command together with the device it goes to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Addressed {
    pub device: DeviceId,
    pub command: ServerCommand,
}

impl Addressed {
    fn new(device: DeviceId, command: ServerCommand) -> Self {
        Self { device, command }
    }
}

/// Serializes a map as a list of `[key, value]` pairs, so non-string keys
/// survive JSON and serde's buffered (tagged) deserialization.
pub(crate) mod pairs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        map: &BTreeMap<K, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Everything the model knows. Serializes deterministically.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionState {
    pub poses: BTreeMap<DeviceId, DevicePose>,
    pub screens: BTreeMap<DeviceId, ScreenSpec>,
    pub resources: BTreeMap<ResourceId, Resource>,
    pub relations: BTreeSet<Relation>,
    pub global_pos: BTreeMap<ResourceId, Vec3>,
    pub highlight_active: Option<ResourceId>,
    pub timeline_active: bool,
    /// Resources currently highlighted and the device that was told so.
    pub highlighted: BTreeMap<ResourceId, DeviceId>,
    /// Lines currently drawn; `ToPoint` lines keep the endpoint last sent.
    #[serde(with = "pairs")]
    pub lines: BTreeMap<LineKey, Option<Vec2>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub throw_threshold_px_s: f64,
    pub landing_margin_px: f64,
    pub line_damping_px: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            throw_threshold_px_s: DEFAULT_THROW_THRESHOLD_PX_S,
            landing_margin_px: LANDING_MARGIN_PX,
            line_damping_px: LINE_DAMPING_PX,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteractionModel {
    config: ModelConfig,
    state: InteractionState,
}

impl InteractionModel {
    pub fn new(config: ModelConfig) -> Self {
        Self { config, state: InteractionState::default() }
    }

    pub fn from_parts(config: ModelConfig, state: InteractionState) -> Self {
        Self { config, state }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn state(&self) -> &InteractionState {
        &self.state
    }

    pub fn into_state(self) -> InteractionState {
        self.state
    }

    /// Canonical JSON form of the state, used to compare runs.
    pub fn state_json(&self) -> String {
        serde_json::to_string(&self.state).expect("state serializes")
    }

    pub fn register_device(&mut self, device: DeviceId, screen: ScreenSpec) -> Result<(), ModelError> {
        if !screen.is_valid() {
            return Err(ModelError::UnknownDevice(device));
        }
        self.state.screens.insert(device, screen);
        Ok(())
    }

    pub fn insert_resource(&mut self, r: Resource) -> Result<(), ModelError> {
        let id = r.resource_id;
        if let Some(host) = r.host_device {
            let screen = self
                .state
                .screens
                .get(&host)
                .ok_or_else(|| ModelError::InvalidResource(id, format!("host device {host} is not registered")))?;
            if !r.local_pos.is_finite() || !screen.contains_px(r.local_pos) {
                return Err(ModelError::InvalidResource(id, "position outside host screen".into()));
            }
        }
        self.state.resources.insert(id, r);
        self.recompute_global(id);
        Ok(())
    }

    pub fn add_relation(&mut self, rel: Relation) -> Result<(), ModelError> {
        for id in [rel.a, rel.b] {
            if !self.state.resources.contains_key(&id) {
                return Err(ModelError::UnknownResource(id));
            }
        }
        let rel = Relation::new(rel.a, rel.b, rel.kind)?;
        self.state.relations.insert(rel);
        Ok(())
    }

    /// Routes one device message to its handler. Session-level messages
    /// (hello, ping, state dumps) produce nothing here.
    pub fn apply(&mut self, device: DeviceId, msg: &DeviceMessage) -> Result<Vec<Addressed>, ModelError> {
        match *msg {
            DeviceMessage::Moved { resource_id, x_px, y_px } => {
                self.on_moved(device, resource_id, Vec2::new(x_px, y_px))
            }
            DeviceMessage::Clicked { resource_id } => self.on_clicked(device, resource_id),
            DeviceMessage::LongClicked { resource_id } => self.on_long_clicked(device, resource_id),
            DeviceMessage::Thrown { resource_id, vx_px_s, vy_px_s } => {
                self.on_thrown(device, resource_id, Vec2::new(vx_px_s, vy_px_s))
            }
            DeviceMessage::Hello { .. } | DeviceMessage::Ping { .. } | DeviceMessage::DumpState => Ok(Vec::new()),
        }
    }

    fn resource(&self, id: ResourceId) -> Result<&Resource, ModelError> {
        self.state.resources.get(&id).ok_or(ModelError::UnknownResource(id))
    }

    fn hosted_on(&self, device: DeviceId, id: ResourceId) -> Result<&Resource, ModelError> {
        let r = self.resource(id)?;
        if r.host_device != Some(device) {
            return Err(ModelError::WrongHost { resource: id, device });
        }
        Ok(r)
    }

    fn transform(&self, device: DeviceId) -> Option<Transform> {
        self.state.poses.get(&device).map(pose_to_transform)
    }

    fn recompute_global(&mut self, id: ResourceId) {
        let placed = self.state.resources.get(&id).and_then(|r| {
            let host = r.host_device?;
            let t = self.transform(host)?;
            let screen = self.state.screens.get(&host)?;
            Some(local_to_global(&t, screen.px_to_local_mm(r.local_pos)))
        });
        match placed {
            Some(g) => self.state.global_pos.insert(id, g),
            None => self.state.global_pos.remove(&id),
        };
    }

    fn recompute_all_global(&mut self) {
        let ids: Vec<_> = self.state.resources.keys().copied().collect();
        for id in ids {
            self.recompute_global(id);
        }
    }

    pub fn on_moved(&mut self, device: DeviceId, id: ResourceId, p: Vec2) -> Result<Vec<Addressed>, ModelError> {
        self.hosted_on(device, id)?;
        if !p.is_finite() {
            return Err(ModelError::InvalidResource(id, "non-finite position".into()));
        }
        let screen = self.state.screens[&device];
        let r = self.state.resources.get_mut(&id).expect("checked above");
        r.local_pos = screen.clamp_px(p);
        self.recompute_global(id);
        Ok(self.refresh_lines())
    }

    /// Direct reference neighbors of `id`.
    pub fn related_set(&self, id: ResourceId) -> Result<BTreeSet<ResourceId>, ModelError> {
        self.resource(id)?;
        Ok(self
            .state
            .relations
            .iter()
            .filter(|rel| rel.kind == RelationKind::Reference)
            .filter_map(|rel| match (rel.a == id, rel.b == id) {
                (true, _) => Some(rel.b),
                (_, true) => Some(rel.a),
                _ => None,
            })
            .collect())
    }

    fn highlights_off(&mut self) -> Vec<Addressed> {
        let out = std::mem::take(&mut self.state.highlighted)
            .into_iter()
            .map(|(r, d)| Addressed::new(d, ServerCommand::Highlight { resource_id: r, on: false }))
            .collect();
        self.state.highlight_active = None;
        out
    }

    /// Toggles highlighting of `id` and its reference neighbors.
    pub fn on_clicked(&mut self, device: DeviceId, id: ResourceId) -> Result<Vec<Addressed>, ModelError> {
        self.hosted_on(device, id)?;
        let was_active = self.state.highlight_active == Some(id);
        let mut out = self.highlights_off();
        if was_active {
            return Ok(out);
        }
        let group = std::iter::once(id).chain(self.related_set(id)?);
        for r in group {
            if let Some(host) = self.state.resources[&r].host_device {
                if self.state.highlighted.insert(r, host).is_none() {
                    out.push(Addressed::new(host, ServerCommand::Highlight { resource_id: r, on: true }));
                }
            }
        }
        self.state.highlight_active = Some(id);
        Ok(out)
    }

    /// Visible timestamped resources in event order; ties by id.
    pub fn timeline_order(&self) -> Vec<ResourceId> {
        let mut v: Vec<(i64, ResourceId)> = self
            .state
            .resources
            .values()
            .filter(|r| r.host_device.is_some())
            .filter_map(|r| r.timestamp.map(|t| (t, r.resource_id)))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, id)| id).collect()
    }

    pub fn on_long_clicked(&mut self, device: DeviceId, id: ResourceId) -> Result<Vec<Addressed>, ModelError> {
        let r = self.hosted_on(device, id)?;
        if r.timestamp.is_none() {
            return Err(ModelError::NoTemporalData(id));
        }
        self.state.timeline_active = !self.state.timeline_active;
        Ok(self.refresh_lines())
    }

    /// Where `g` falls on `device`'s screen, in px. Only meaningful when
    /// `device` has a pose.
    fn point_on(&self, device: DeviceId, g: Vec3) -> Vec2 {
        let t = self.transform(device).expect("caller checked pose");
        self.state.screens[&device].local_mm_to_px(project_to_device(&t, g))
    }

    fn desired_lines(&self) -> BTreeMap<LineKey, Option<Vec2>> {
        let mut out = BTreeMap::new();
        if !self.state.timeline_active {
            return out;
        }
        let order = self.timeline_order();
        for pair in order.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let ha = self.state.resources[&a].host_device.expect("timeline holds visible resources");
            let hb = self.state.resources[&b].host_device.expect("timeline holds visible resources");
            if ha == hb {
                out.insert(LineKey::Local { device: ha, from: a, to: b }, None);
                continue;
            }
            let (Some(&ga), Some(&gb)) = (self.state.global_pos.get(&a), self.state.global_pos.get(&b)) else {
                continue;
            };
            out.insert(
                LineKey::ToPoint { device: ha, resource: a, toward: b },
                Some(self.point_on(ha, gb)),
            );
            out.insert(
                LineKey::ToPoint { device: hb, resource: b, toward: a },
                Some(self.point_on(hb, ga)),
            );
        }
        out
    }

    /// Brings the drawn lines in line with the current timeline. Endpoints
    /// that moved by no more than the damping distance are left alone.
    fn refresh_lines(&mut self) -> Vec<Addressed> {
        let desired = self.desired_lines();
        let mut out = Vec::new();
        let current = std::mem::take(&mut self.state.lines);
        for (key, point) in &current {
            if !desired.contains_key(key) {
                out.push(Addressed::new(key.device(), key.command(*point, false)));
            }
        }
        let mut next = BTreeMap::new();
        for (key, point) in desired {
            match current.get(&key) {
                None => {
                    out.push(Addressed::new(key.device(), key.command(point, true)));
                    next.insert(key, point);
                }
                Some(&old) => {
                    let moved = match (old, point) {
                        (Some(o), Some(n)) => o.distance(n) > self.config.line_damping_px,
                        _ => false,
                    };
                    if moved {
                        out.push(Addressed::new(key.device(), key.command(old, false)));
                        out.push(Addressed::new(key.device(), key.command(point, true)));
                        next.insert(key, point);
                    } else {
                        next.insert(key, old);
                    }
                }
            }
        }
        self.state.lines = next;
        out
    }

    pub fn on_thrown(&mut self, device: DeviceId, id: ResourceId, v: Vec2) -> Result<Vec<Addressed>, ModelError> {
        let r = self.hosted_on(device, id)?;
        let local_pos = r.local_pos;
        let speed = v.norm();
        let threshold = self.config.throw_threshold_px_s;
        if !speed.is_finite() || speed < threshold || speed == 0.0 {
            return Err(ModelError::BelowThreshold { speed, threshold });
        }
        let screen = self.state.screens[&device];
        let target = self.state.poses.get(&device).and_then(|src| {
            let theta = throw_direction(src, v, &screen).ok()?;
            let others: Vec<DevicePose> = self
                .state
                .poses
                .values()
                .filter(|p| p.device_id != device)
                .copied()
                .collect();
            select_throw_target(src, &others, theta).map(|t| (t, theta))
        });

        let Some((target, theta)) = target else {
            return Ok(vec![Addressed::new(
                device,
                ServerCommand::Show { resource_id: id, x_px: local_pos.x, y_px: local_pos.y },
            )]);
        };

        let landing = self.landing_px(id, target, theta);
        let mut out = vec![Addressed::new(device, ServerCommand::Hide { resource_id: id })];
        let highlighted = self.state.highlighted.remove(&id).is_some();
        if highlighted {
            out.push(Addressed::new(device, ServerCommand::Highlight { resource_id: id, on: false }));
        }
        let r = self.state.resources.get_mut(&id).expect("checked above");
        r.host_device = Some(target);
        r.local_pos = landing;
        self.recompute_global(id);
        out.push(Addressed::new(
            target,
            ServerCommand::Show { resource_id: id, x_px: landing.x, y_px: landing.y },
        ));
        if highlighted {
            self.state.highlighted.insert(id, target);
            out.push(Addressed::new(target, ServerCommand::Highlight { resource_id: id, on: true }));
        }
        out.extend(self.refresh_lines());
        Ok(out)
    }

    /// Landing spot of a thrown resource on `target`: the point where the
    /// throw ray first enters the target screen, pulled inside by the
    /// landing margin. Falls back to the screen center when the ray misses.
    fn landing_px(&self, id: ResourceId, target: DeviceId, theta: f64) -> Vec2 {
        let screen = self.state.screens[&target];
        let center = screen.center_px();
        let (Some(t), Some(&g)) = (self.transform(target), self.state.global_pos.get(&id)) else {
            return center;
        };
        let origin = screen.local_mm_to_px(global_to_local(&t, g));
        let dir_local = t.rotation.transpose().apply(Vec3::new(theta.cos(), theta.sin(), 0.0));
        let dir = Vec2::new(dir_local.x / screen.mm_per_px_x(), -dir_local.y / screen.mm_per_px_y());
        let hit = ray_rect_entry(origin, dir, screen.width_px, screen.height_px).unwrap_or(center);
        let m = self.config.landing_margin_px;
        let pull = |v: f64, extent: f64| if extent > 2.0 * m { v.clamp(m, extent - m) } else { extent / 2.0 };
        Vec2::new(pull(hit.x, screen.width_px), pull(hit.y, screen.height_px))
    }

    /// Applies a tracking frame. Poses older than the stored one for the
    /// same device are ignored.
    pub fn on_pose_frame(&mut self, frame: &[DevicePose]) -> Result<Vec<Addressed>, ModelError> {
        for p in frame {
            if !self.state.screens.contains_key(&p.device_id) {
                return Err(ModelError::UnknownDevice(p.device_id));
            }
            if !p.is_finite() {
                return Err(ModelError::InvalidPose(p.device_id));
            }
        }
        for p in frame {
            let stale = self
                .state
                .poses
                .get(&p.device_id)
                .is_some_and(|old| old.frame_time > p.frame_time);
            if !stale {
                self.state.poses.insert(p.device_id, *p);
            }
        }
        self.recompute_all_global();
        Ok(self.refresh_lines())
    }

    /// What `device` should be displaying right now.
    pub fn screen_snapshot(&self, device: DeviceId) -> ScreenSnapshot {
        let mut snap = ScreenSnapshot::default();
        for r in self.state.resources.values() {
            if r.host_device == Some(device) {
                snap.resources.insert(r.resource_id, r.local_pos);
            }
        }
        snap.highlighted = self
            .state
            .highlighted
            .iter()
            .filter(|(_, d)| **d == device)
            .map(|(r, _)| *r)
            .collect();
        for (key, point) in &self.state.lines {
            match *key {
                LineKey::Local { device: d, from, to } if d == device => {
                    snap.lines_local.insert((from, to));
                }
                LineKey::ToPoint { device: d, resource, .. } if d == device => {
                    let p = point.unwrap_or_default();
                    snap.lines_to_point.push(PointLine { resource_id: resource, x_px: p.x, y_px: p.y });
                }
                _ => {}
            }
        }
        snap.sort_lines();
        snap
    }

    /// Commands that rebuild `device`'s screen from scratch, sent when a
    /// device (re)connects.
    pub fn restore_commands(&self, device: DeviceId) -> Vec<ServerCommand> {
        let mut out: Vec<ServerCommand> = self
            .state
            .resources
            .values()
            .map(|r| ServerCommand::ResourceDef {
                resource_id: r.resource_id,
                text: r.text.clone(),
                has_timestamp: r.timestamp.is_some(),
            })
            .collect();
        for r in self.state.resources.values().filter(|r| r.host_device == Some(device)) {
            out.push(ServerCommand::Show { resource_id: r.resource_id, x_px: r.local_pos.x, y_px: r.local_pos.y });
        }
        for (r, _) in self.state.highlighted.iter().filter(|(_, d)| **d == device) {
            out.push(ServerCommand::Highlight { resource_id: *r, on: true });
        }
        for (key, point) in self.state.lines.iter().filter(|(k, _)| k.device() == device) {
            out.push(key.command(*point, true));
        }
        out
    }
}

/// First point where the ray `origin + t * dir` (t >= 0) enters the
/// rectangle `[0, w] x [0, h]`. An origin already inside is its own entry.
pub fn ray_rect_entry(origin: Vec2, dir: Vec2, w: f64, h: f64) -> Option<Vec2> {
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for (o, d, hi) in [(origin.x, dir.x, w), (origin.y, dir.y, h)] {
        if d == 0.0 {
            if o < 0.0 || o > hi {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((0.0 - o) / d, (hi - o) / d);
        t_enter = t_enter.max(t1.min(t2));
        t_exit = t_exit.min(t1.max(t2));
    }
    if t_enter > t_exit {
        return None;
    }
    Some(Vec2::new(origin.x + dir.x * t_enter, origin.y + dir.y * t_enter))
}
