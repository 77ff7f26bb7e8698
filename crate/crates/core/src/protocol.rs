//! Newline-delimited JSON wire formats.
//!
//! Three vocabularies share one framing: device messages (device to
//! server), server commands (server to device) and the tracking feed
//! (poll requests and pose frames). Each line is one UTF-8 JSON object
//! whose `type` field names the variant in snake_case. Unknown fields are
//! ignored; unknown types and missing fields are rejected.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::geometry::{ScreenSpec, Vec2};
use crate::{DeviceId, ResourceId};

/// Longest accepted line, newline excluded.
pub const MAX_LINE_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("line is not valid UTF-8")]
    NonUtf8,
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

/// Messages a device sends to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviceMessage {
    Hello { device_id: DeviceId, screen: ScreenSpec },
    Moved { resource_id: ResourceId, x_px: f64, y_px: f64 },
    Clicked { resource_id: ResourceId },
    LongClicked { resource_id: ResourceId },
    Thrown { resource_id: ResourceId, vx_px_s: f64, vy_px_s: f64 },
    /// Barrier: answered with `pong` once everything queued before it is processed.
    Ping { seq: u64 },
    /// Debug: asks for the server's view of this device's screen.
    DumpState,
}

/// A line drawn from a resource toward an arbitrary screen point.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PointLine {
    pub resource_id: ResourceId,
    pub x_px: f64,
    pub y_px: f64,
}

/// What one device should currently display.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScreenSnapshot {
    #[serde(with = "crate::model::pairs")]
    pub resources: BTreeMap<ResourceId, Vec2>,
    pub highlighted: BTreeSet<ResourceId>,
    pub lines_local: BTreeSet<(ResourceId, ResourceId)>,
    pub lines_to_point: Vec<PointLine>,
}

impl ScreenSnapshot {
    pub fn sort_lines(&mut self) {
        self.lines_to_point.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    }
}

/// Commands the server sends to a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerCommand {
    ResourceDef { resource_id: ResourceId, text: String, has_timestamp: bool },
    Show { resource_id: ResourceId, x_px: f64, y_px: f64 },
    Hide { resource_id: ResourceId },
    Highlight { resource_id: ResourceId, on: bool },
    LineLocal { from_resource: ResourceId, to_resource: ResourceId, on: bool },
    LineToPoint { resource_id: ResourceId, x_px: f64, y_px: f64, on: bool },
    Error { message: String },
    Pong { seq: u64, frame_t_ms: Option<u64> },
    StateDump { device_id: DeviceId, screen: ScreenSnapshot },
}

impl ServerCommand {
    /// Line and highlight commands can be coalesced under backpressure;
    /// everything else changes what is shown and must be delivered.
    pub fn is_essential(&self) -> bool {
        !matches!(
            self,
            ServerCommand::Highlight { .. }
                | ServerCommand::LineLocal { .. }
                | ServerCommand::LineToPoint { .. }
        )
    }

    /// Debug traffic that is not part of the rendering stream.
    pub fn is_debug(&self) -> bool {
        matches!(self, ServerCommand::Pong { .. } | ServerCommand::StateDump { .. })
    }
}

/// One tracked rigid body in a frame. Angles in degrees, distances in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBody {
    pub id: u32,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    /// About X.
    pub roll_deg: f64,
    /// About Y.
    pub pitch_deg: f64,
    /// About Z.
    pub yaw_deg: f64,
}

impl TrackedBody {
    fn is_finite(&self) -> bool {
        [self.x_mm, self.y_mm, self.z_mm, self.roll_deg, self.pitch_deg, self.yaw_deg]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingFrame {
    pub t_ms: u64,
    pub bodies: Vec<TrackedBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrackingMessage {
    Poll,
    Frame(TrackingFrame),
}

/// A line-protocol vocabulary.
pub trait Wire: Serialize + DeserializeOwned {
    const TYPES: &'static [&'static str];

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

fn finite(name: &str, vals: &[f64]) -> Result<(), String> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(format!("non-finite value in `{name}`"))
    }
}

impl Wire for DeviceMessage {
    const TYPES: &'static [&'static str] =
        &["hello", "moved", "clicked", "long_clicked", "thrown", "ping", "dump_state"];

    fn validate(&self) -> Result<(), String> {
        match self {
            DeviceMessage::Hello { screen, .. } if !screen.is_valid() => {
                Err("screen dimensions must be positive".into())
            }
            DeviceMessage::Moved { x_px, y_px, .. } => finite("moved", &[*x_px, *y_px]),
            DeviceMessage::Thrown { vx_px_s, vy_px_s, .. } => finite("thrown", &[*vx_px_s, *vy_px_s]),
            _ => Ok(()),
        }
    }
}

impl Wire for ServerCommand {
    const TYPES: &'static [&'static str] = &[
        "resource_def",
        "show",
        "hide",
        "highlight",
        "line_local",
        "line_to_point",
        "error",
        "pong",
        "state_dump",
    ];

    fn validate(&self) -> Result<(), String> {
        match self {
            ServerCommand::Show { x_px, y_px, .. } => finite("show", &[*x_px, *y_px]),
            ServerCommand::LineToPoint { x_px, y_px, .. } => finite("line_to_point", &[*x_px, *y_px]),
            _ => Ok(()),
        }
    }
}

impl Wire for TrackingMessage {
    const TYPES: &'static [&'static str] = &["poll", "frame"];

    fn validate(&self) -> Result<(), String> {
        let TrackingMessage::Frame(frame) = self else {
            return Ok(());
        };
        let mut seen = BTreeSet::new();
        for b in &frame.bodies {
            if !b.is_finite() {
                return Err(format!("non-finite pose for body {}", b.id));
            }
            if !seen.insert(b.id) {
                return Err(format!("duplicate body id {}", b.id));
            }
        }
        Ok(())
    }
}

/// Serializes one message as a `\n`-terminated line.
pub fn encode<T: Wire>(msg: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("wire types always serialize");
    out.push(b'\n');
    out
}

pub fn encode_string<T: Wire>(msg: &T) -> String {
    String::from_utf8(encode(msg)).expect("serde_json emits UTF-8")
}

/// Parses one line. A single trailing `\n` (or `\r\n`) is accepted.
pub fn decode<T: Wire>(line: &[u8]) -> Result<T, DecodeError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let text = std::str::from_utf8(line).map_err(|_| DecodeError::NonUtf8)?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let kind = match value.get("type") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err(DecodeError::Malformed("`type` must be a string".into())),
        None if value.is_object() => return Err(DecodeError::Malformed("missing `type`".into())),
        None => return Err(DecodeError::Malformed("expected a JSON object".into())),
    };
    if !T::TYPES.contains(&kind.as_str()) {
        return Err(DecodeError::UnknownType(kind));
    }
    let msg: T = serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    msg.validate().map_err(DecodeError::Malformed)?;
    Ok(msg)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("line exceeds {0} bytes")]
    LineTooLong(usize),
}

/// Reassembles lines from arbitrarily chunked input.
#[derive(Debug)]
pub struct LineFramer {
    buf: Vec<u8>,
    scanned: usize,
    max_len: usize,
    discarding: bool,
}

impl Default for LineFramer {
    fn default() -> Self {
        Self::new(MAX_LINE_LEN)
    }
}

impl LineFramer {
    pub fn new(max_len: usize) -> Self {
        Self {
            buf: Vec::new(),
            scanned: 0,
            max_len,
            discarding: false,
        }
    }

    pub fn feed(&mut self, chunk: &[u8]) {
        self.buf.extend_from_slice(chunk);
    }

    /// Next complete line without its terminator. An overlong line yields
    /// one error and is skipped up to its newline.
    pub fn next_line(&mut self) -> Option<Result<Vec<u8>, FramingError>> {
        loop {
            match self.buf[self.scanned..].iter().position(|&b| b == b'\n') {
                Some(off) => {
                    let end = self.scanned + off;
                    let mut line: Vec<u8> = self.buf.drain(..=end).collect();
                    line.pop();
                    self.scanned = 0;
                    if self.discarding {
                        self.discarding = false;
                        continue;
                    }
                    if line.len() > self.max_len {
                        return Some(Err(FramingError::LineTooLong(self.max_len)));
                    }
                    return Some(Ok(line));
                }
                None => {
                    if self.buf.len() > self.max_len {
                        self.buf.clear();
                        self.scanned = 0;
                        if !self.discarding {
                            self.discarding = true;
                            return Some(Err(FramingError::LineTooLong(self.max_len)));
                        }
                    } else {
                        self.scanned = self.buf.len();
                    }
                    return None;
                }
            }
        }
    }

    /// Bytes held after the last complete line.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Async line reader over any byte stream.
pub struct LineReader<R> {
    inner: R,
    framer: LineFramer,
    chunk: Box<[u8]>,
}

impl<R: AsyncRead + Unpin> LineReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            framer: LineFramer::default(),
            chunk: vec![0u8; 8192].into_boxed_slice(),
        }
    }

    /// `Ok(None)` on clean end of stream.
    pub async fn next_line(&mut self) -> Result<Option<Vec<u8>>, ReadError> {
        loop {
            if let Some(line) = self.framer.next_line() {
                return Ok(Some(line?));
            }
            let n = self.inner.read(&mut self.chunk).await?;
            if n == 0 {
                return Ok(None);
            }
            self.framer.feed(&self.chunk[..n]);
        }
    }

    pub async fn next_message<T: Wire>(&mut self) -> Result<Option<T>, ReadError> {
        match self.next_line().await? {
            Some(line) => Ok(Some(decode(&line)?)),
            None => Ok(None),
        }
    }
}

pub async fn write_message<W: AsyncWrite + Unpin, T: Wire>(w: &mut W, msg: &T) -> std::io::Result<()> {
    w.write_all(&encode(msg)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        assert_eq!(
            encode_string(&DeviceMessage::Clicked { resource_id: 7 }),
            "{\"type\":\"clicked\",\"resource_id\":7}\n"
        );
        assert_eq!(
            encode_string(&ServerCommand::Highlight { resource_id: 3, on: true }),
            "{\"type\":\"highlight\",\"resource_id\":3,\"on\":true}\n"
        );
        assert_eq!(encode_string(&TrackingMessage::Poll), "{\"type\":\"poll\"}\n");
    }

    #[test]
    fn decode_examples() {
        let m: DeviceMessage = decode(br#"{"type":"moved","resource_id":1,"x_px":10,"y_px":20}"#).unwrap();
        assert_eq!(m, DeviceMessage::Moved { resource_id: 1, x_px: 10.0, y_px: 20.0 });
        assert_eq!(
            decode::<DeviceMessage>(br#"{"type":"warp"}"#),
            Err(DecodeError::UnknownType("warp".into()))
        );
        assert!(matches!(
            decode::<DeviceMessage>(br#"{"type":"moved","resource_id":1"#),
            Err(DecodeError::Malformed(_))
        ));
        assert_eq!(decode::<DeviceMessage>(b"\xff\xfe"), Err(DecodeError::NonUtf8));
    }

    #[test]
    fn decode_strictness() {
        // Missing field.
        assert!(matches!(
            decode::<DeviceMessage>(br#"{"type":"moved","resource_id":1,"x_px":10}"#),
            Err(DecodeError::Malformed(_))
        ));
        // Negative id.
        assert!(matches!(
            decode::<DeviceMessage>(br#"{"type":"clicked","resource_id":-1}"#),
            Err(DecodeError::Malformed(_))
        ));
        // Unknown fields are ignored.
        let m: DeviceMessage =
            decode(b"{\"type\":\"clicked\",\"resource_id\":2,\"pressure\":0.4}\r\n").unwrap();
        assert_eq!(m, DeviceMessage::Clicked { resource_id: 2 });
        // Device vocabulary does not accept server commands.
        assert!(matches!(
            decode::<DeviceMessage>(br#"{"type":"hide","resource_id":2}"#),
            Err(DecodeError::UnknownType(_))
        ));
        assert!(matches!(decode::<DeviceMessage>(b"[1,2]"), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode::<DeviceMessage>(b"{}"), Err(DecodeError::Malformed(_))));
        assert!(matches!(
            decode::<DeviceMessage>(br#"{"type":7}"#),
            Err(DecodeError::Malformed(_))
        ));
        assert!(matches!(
            decode::<DeviceMessage>(
                br#"{"type":"hello","device_id":1,"screen":{"width_px":0,"height_px":1,"width_mm":1,"height_mm":1}}"#
            ),
            Err(DecodeError::Malformed(_))
        ));
    }

    #[test]
    fn tracking_frames() {
        let line = br#"{"type":"frame","t_ms":40,"bodies":[{"id":1,"x_mm":1,"y_mm":2,"z_mm":3,"roll_deg":0,"pitch_deg":0,"yaw_deg":90}]}"#;
        let TrackingMessage::Frame(f) = decode(line).unwrap() else { panic!() };
        assert_eq!(f.t_ms, 40);
        assert_eq!(f.bodies[0].yaw_deg, 90.0);
        let dup = br#"{"type":"frame","t_ms":40,"bodies":[{"id":1,"x_mm":1,"y_mm":2,"z_mm":3,"roll_deg":0,"pitch_deg":0,"yaw_deg":90},{"id":1,"x_mm":1,"y_mm":2,"z_mm":3,"roll_deg":0,"pitch_deg":0,"yaw_deg":90}]}"#;
        assert!(matches!(decode::<TrackingMessage>(dup), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode::<TrackingMessage>(br#"{"type":"frame"}"#), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn floats_roundtrip_exactly() {
        let c = ServerCommand::LineToPoint { resource_id: 1, x_px: 0.1 + 0.2, y_px: -1.0e-300, on: true };
        assert_eq!(decode::<ServerCommand>(&encode(&c)).unwrap(), c);
    }

    #[test]
    fn framer_handles_split_lines() {
        let mut f = LineFramer::new(64);
        f.feed(b"{\"a\":1}\n{\"b\"");
        assert_eq!(f.next_line().unwrap().unwrap(), b"{\"a\":1}");
        assert!(f.next_line().is_none());
        f.feed(b":2}\n\n");
        assert_eq!(f.next_line().unwrap().unwrap(), b"{\"b\":2}");
        assert_eq!(f.next_line().unwrap().unwrap(), b"");
        assert!(f.next_line().is_none());
        assert_eq!(f.pending(), 0);
    }

    #[test]
    fn framer_rejects_overlong_lines_once() {
        let mut f = LineFramer::new(4);
        f.feed(b"0123456789");
        assert_eq!(f.next_line(), Some(Err(FramingError::LineTooLong(4))));
        f.feed(b"abcdef");
        assert!(f.next_line().is_none());
        f.feed(b"xyz\nok\n");
        assert_eq!(f.next_line().unwrap().unwrap(), b"ok");
        let mut f = LineFramer::new(4);
        f.feed(b"toolong\nok\n");
        assert_eq!(f.next_line(), Some(Err(FramingError::LineTooLong(4))));
        assert_eq!(f.next_line().unwrap().unwrap(), b"ok");
    }

    #[tokio::test]
    async fn line_reader_reads_messages() {
        let data: &[u8] = b"{\"type\":\"poll\"}\n{\"type\":\"poll\"}\n";
        let mut r = LineReader::new(data);
        assert_eq!(r.next_message::<TrackingMessage>().await.unwrap(), Some(TrackingMessage::Poll));
        assert_eq!(r.next_message::<TrackingMessage>().await.unwrap(), Some(TrackingMessage::Poll));
        assert_eq!(r.next_message::<TrackingMessage>().await.unwrap(), None);
    }
}
