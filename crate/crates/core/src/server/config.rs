use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::geometry::ScreenSpec;
use crate::model::{ModelConfig, DEFAULT_THROW_THRESHOLD_PX_S, LANDING_MARGIN_PX, LINE_DAMPING_PX};
use crate::store::DEFAULT_FLUSH_INTERVAL;
use crate::DeviceId;

use super::ServerError;

/// One registered tablet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device_id: DeviceId,
    /// Rigid-body id reported by the tracking feed; defaults to `device_id`.
    #[serde(default)]
    pub body_id: Option<u32>,
    pub screen: ScreenSpec,
}

fn default_threshold() -> f64 {
    DEFAULT_THROW_THRESHOLD_PX_S
}

fn default_poll_interval() -> u64 {
    10
}

fn default_flush_interval() -> u64 {
    DEFAULT_FLUSH_INTERVAL.as_millis() as u64
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub devices: Vec<DeviceEntry>,
    #[serde(default = "default_threshold")]
    pub throw_threshold_px_s: f64,
    #[serde(default = "default_poll_interval")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_flush_interval")]
    pub flush_interval_ms: u64,
}

impl ServerConfig {
    pub fn from_json(text: &str) -> Result<Self, ServerError> {
        let cfg: ServerConfig =
            serde_json::from_str(text).map_err(|e| ServerError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServerError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: String| Err(ServerError::ConfigInvalid(m));
        let mut ids = BTreeSet::new();
        let mut bodies = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.device_id) {
                return bad(format!("device {} registered twice", d.device_id));
            }
            if !bodies.insert(d.body()) {
                return bad(format!("tracking body {} assigned twice", d.body()));
            }
            if !d.screen.is_valid() {
                return bad(format!("device {} has an invalid screen", d.device_id));
            }
        }
        if !(self.throw_threshold_px_s.is_finite() && self.throw_threshold_px_s > 0.0) {
            return bad("throw threshold must be positive".into());
        }
        if self.flush_interval_ms == 0 || self.flush_interval_ms > 500 {
            return bad("flush interval must be within 1..=500 ms".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            throw_threshold_px_s: self.throw_threshold_px_s,
            landing_margin_px: LANDING_MARGIN_PX,
            line_damping_px: LINE_DAMPING_PX,
        }
    }

    pub fn body_map(&self) -> BTreeMap<u32, DeviceId> {
        self.devices.iter().map(|d| (d.body(), d.device_id)).collect()
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_millis(self.poll_interval_ms)
    }

    pub fn flush_interval(&self) -> Duration {
        Duration::from_millis(self.flush_interval_ms)
    }
}

impl DeviceEntry {
    pub fn body(&self) -> u32 {
        self.body_id.unwrap_or(self.device_id)
    }
}
