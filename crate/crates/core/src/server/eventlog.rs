//! Append-only NDJSON record of everything the server sees and sends.
//!
//! The first line is a header with the model's initial state. Replaying
//! the inbound messages and pose frames that follow against that state
//! reproduces the server's final state exactly.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DevicePose;
use crate::model::{InteractionModel, InteractionState, ModelConfig};
use crate::protocol::{DeviceMessage, ServerCommand};
use crate::DeviceId;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    Header {
        version: u32,
        config: ModelConfig,
        #[serde(deserialize_with = "state_via_value")]
        state: InteractionState,
    },
    Session { device: DeviceId, event: String },
    Inbound { device: DeviceId, msg: DeviceMessage },
    Frame { frame_t_ms: u64, poses: Vec<DevicePose> },
    Outbound { device: DeviceId, cmd: ServerCommand, delivered: bool },
    Rejected { device: Option<DeviceId>, error: String },
}

/// Integer map keys do not survive serde's buffering of tagged enums, so
/// the state goes through a `Value` first.
fn state_via_value<'de, D: serde::Deserializer<'de>>(d: D) -> Result<InteractionState, D::Error> {
    let value = serde_json::Value::deserialize(d)?;
    serde_json::from_value(value).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// Milliseconds since server start, from a monotonic clock.
    pub t_ms: u64,
    pub event: LogEvent,
}

pub struct EventLog {
    out: Option<BufWriter<File>>,
    start: Instant,
}

impl EventLog {
    pub fn disabled() -> Self {
        Self { out: None, start: Instant::now() }
    }

    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: Some(BufWriter::new(File::create(path)?)), start: Instant::now() })
    }

    pub fn record(&mut self, event: LogEvent) {
        let Some(out) = self.out.as_mut() else { return };
        let line = LogLine { t_ms: self.start.elapsed().as_millis() as u64, event };
        let mut bytes = serde_json::to_vec(&line).expect("log lines serialize");
        bytes.push(b'\n');
        if let Err(e) = out.write_all(&bytes) {
            log::error!("event log write failed: {e}; disabling log");
            self.out = None;
        }
    }

    pub fn flush(&mut self) {
        if let Some(out) = self.out.as_mut() {
            if let Err(e) = out.flush() {
                log::error!("event log flush failed: {e}");
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log line {line}: {detail}")]
    BadLine { line: usize, detail: String },
    #[error("log does not start with a header")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rebuilds the final model from a log.
pub fn replay(reader: impl BufRead) -> Result<InteractionModel, ReplayError> {
    let mut model: Option<InteractionModel> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line)
            .map_err(|e| ReplayError::BadLine { line: idx + 1, detail: e.to_string() })?;
        match (parsed.event, model.as_mut()) {
            (LogEvent::Header { config, state, .. }, None) => {
                model = Some(InteractionModel::from_parts(config, state));
            }
            (LogEvent::Header { .. }, Some(_)) => {
                return Err(ReplayError::BadLine { line: idx + 1, detail: "second header".into() })
            }
            (_, None) => return Err(ReplayError::MissingHeader),
            (LogEvent::Inbound { device, msg }, Some(m)) => {
                let _ = m.apply(device, &msg);
            }
            (LogEvent::Frame { poses, .. }, Some(m)) => {
                let _ = m.on_pose_frame(&poses);
            }
            _ => {}
        }
    }
    model.ok_or(ReplayError::MissingHeader)
}

pub fn replay_file(path: &Path) -> Result<InteractionModel, ReplayError> {
    replay(std::io::BufReader::new(File::open(path)?))
}
