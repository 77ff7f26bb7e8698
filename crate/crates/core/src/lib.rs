//! Coordination server and simulation harness for a table covered with
//! spatially tracked tablets.
//!
//! Tracked device poses and on-screen gestures flow in; the server keeps a
//! global model of the information items spread across the devices and
//! sends each device the commands it needs to render its part of the table.

pub mod geometry;
pub mod model;
pub mod protocol;
pub mod server;
pub mod simclient;
pub mod store;
pub mod tracking;

pub type DeviceId = u32;
pub type ResourceId = u32;

pub use geometry::{DevicePose, EulerAngles, ScreenSpec, Transform, Vec2, Vec3};
pub use model::{Addressed, InteractionModel, InteractionState, ModelConfig, Relation, RelationKind, Resource};
pub use protocol::{DeviceMessage, ServerCommand, TrackingFrame, TrackingMessage};
