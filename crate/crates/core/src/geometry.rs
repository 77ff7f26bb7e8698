//! Rigid-body pose math for devices lying on the table.
//!
//! Every device reports its geometric center in the global (tracker) frame
//! plus three Euler angles: `gamma` about X, `beta` about Y and `alpha`
//! about Z. The device-to-global rotation is `Rz(alpha) * Ry(beta) *
//! Rx(gamma)`, i.e. the local vector is rotated about X first and about Z
//! last. Angles are radians throughout this module; conversion from the
//! degree-valued wire format happens at ingestion.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DeviceId;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A point or direction in millimeters. Which frame it lives in (global or
/// device-local) is carried by context.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn xy(self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Orientation as three Euler angles in radians, each kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    /// About the global Z axis (yaw).
    pub alpha: f64,
    /// About Y (pitch).
    pub beta: f64,
    /// About X (roll).
    pub gamma: f64,
}

impl EulerAngles {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha: wrap_angle(alpha),
            beta: wrap_angle(beta),
            gamma: wrap_angle(gamma),
        }
    }

    pub fn from_degrees(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Self {
        Self::new(yaw_deg.to_radians(), pitch_deg.to_radians(), roll_deg.to_radians())
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }
}

/// 3x3 rotation matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix =
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn transpose(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose() * *self;
        let mut worst = 0.0f64;
        for (i, row) in p.0.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - expected).abs());
            }
        }
        worst
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, o: RotationMatrix) -> RotationMatrix {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        RotationMatrix(out)
    }
}

/// Elementary rotation about X.
pub fn rot_x(gamma: f64) -> RotationMatrix {
    let (s, c) = gamma.sin_cos();
    RotationMatrix([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
}

/// Elementary rotation about Y.
pub fn rot_y(beta: f64) -> RotationMatrix {
    let (s, c) = beta.sin_cos();
    RotationMatrix([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

/// Elementary rotation about Z.
pub fn rot_z(alpha: f64) -> RotationMatrix {
    let (s, c) = alpha.sin_cos();
    RotationMatrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

/// Device-to-global rotation `Rz(alpha) * Ry(beta) * Rx(gamma)`.
pub fn compose_rotation(angles: EulerAngles) -> RotationMatrix {
    rot_z(angles.alpha) * rot_y(angles.beta) * rot_x(angles.gamma)
}

/// Rigid transform: `p_global = rotation * p_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation: RotationMatrix::IDENTITY,
        translation: Vec3::ZERO,
    };

    /// The 4x4 homogeneous form, bottom row `(0, 0, 0, 1)`.
    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation.0;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Analytic inverse `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform {
            rotation: rt,
            translation: -rt.apply(self.translation),
        }
    }
}

/// One tracked device: geometric center in global mm plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePose {
    pub device_id: DeviceId,
    pub center: Vec3,
    pub angles: EulerAngles,
    pub frame_time: u64,
}

impl DevicePose {
    pub fn new(device_id: DeviceId, center: Vec3, angles: EulerAngles, frame_time: u64) -> Self {
        Self {
            device_id,
            center,
            angles,
            frame_time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.center.is_finite() && self.angles.is_finite()
    }
}

pub fn pose_to_transform(pose: &DevicePose) -> Transform {
    Transform {
        rotation: compose_rotation(pose.angles),
        translation: pose.center,
    }
}

pub fn local_to_global(t: &Transform, p_local: Vec3) -> Vec3 {
    t.rotation.apply(p_local) + t.translation
}

pub fn global_to_local(t: &Transform, p_global: Vec3) -> Vec3 {
    t.rotation.transpose().apply(p_global - t.translation)
}

/// Expresses a global point in another device's local frame. The result is
/// not clipped: points far outside that device's screen are expected.
pub fn project_to_device(t_other: &Transform, p_global: Vec3) -> Vec3 {
    global_to_local(t_other, p_global)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("throw velocity is zero")]
    ZeroVelocity,
}

/// Screen geometry and the pixel/millimeter mapping of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenSpec {
    pub width_px: f64,
    pub height_px: f64,
    pub width_mm: f64,
    pub height_mm: f64,
}

impl ScreenSpec {
    pub fn is_valid(&self) -> bool {
        [self.width_px, self.height_px, self.width_mm, self.height_mm]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn mm_per_px_x(&self) -> f64 {
        self.width_mm / self.width_px
    }

    pub fn mm_per_px_y(&self) -> f64 {
        self.height_mm / self.height_px
    }

    pub fn center_px(&self) -> Vec2 {
        Vec2::new(self.width_px / 2.0, self.height_px / 2.0)
    }

    pub fn contains_px(&self, p: Vec2) -> bool {
        (0.0..=self.width_px).contains(&p.x) && (0.0..=self.height_px).contains(&p.y)
    }

    pub fn clamp_px(&self, p: Vec2) -> Vec2 {
        Vec2::new(p.x.clamp(0.0, self.width_px), p.y.clamp(0.0, self.height_px))
    }

    /// Pixel position to the device-local frame: origin at the screen
    /// center, X right, Y toward the top edge, Z out of the screen.
    pub fn px_to_local_mm(&self, p: Vec2) -> Vec3 {
        Vec3::new(
            (p.x - self.width_px / 2.0) * self.mm_per_px_x(),
            (self.height_px / 2.0 - p.y) * self.mm_per_px_y(),
            0.0,
        )
    }

    /// Inverse of [`ScreenSpec::px_to_local_mm`]; the local Z component is dropped.
    pub fn local_mm_to_px(&self, p: Vec3) -> Vec2 {
        Vec2::new(
            p.x / self.mm_per_px_x() + self.width_px / 2.0,
            self.height_px / 2.0 - p.y / self.mm_per_px_y(),
        )
    }

    /// Screen-space velocity (px/s, Y down) to a local-frame vector (mm/s, Y up).
    pub fn velocity_to_local_mm(&self, v: Vec2) -> Vec3 {
        Vec3::new(v.x * self.mm_per_px_x(), -v.y * self.mm_per_px_y(), 0.0)
    }
}

/// Global table-plane heading of a flick performed on `pose`'s screen.
pub fn throw_direction(
    pose: &DevicePose,
    v_screen: Vec2,
    screen: &ScreenSpec,
) -> Result<f64, GeometryError> {
    if v_screen.norm() == 0.0 {
        return Err(GeometryError::ZeroVelocity);
    }
    let v_local = screen.velocity_to_local_mm(v_screen);
    let v_global = compose_rotation(pose.angles).apply(v_local);
    Ok(v_global.y.atan2(v_global.x))
}

const THROW_TIE_EPS: f64 = 1e-9;

/// Picks the device whose direction, seen from the source center, is
/// closest to `theta`. Only candidates strictly within a quarter turn of
/// the throw heading qualify. Ties go to the nearer device, then the lower id.
pub fn select_throw_target(
    source: &DevicePose,
    others: &[DevicePose],
    theta: f64,
) -> Option<DeviceId> {
    let mut best: Option<(f64, f64, DeviceId)> = None;
    for other in others.iter().filter(|o| o.device_id != source.device_id) {
        let d = (other.center - source.center).xy();
        let phi = wrap_angle(d.y.atan2(d.x) - theta).abs();
        if phi >= PI / 2.0 {
            continue;
        }
        let cand = (phi, d.norm(), other.device_id);
        best = match best {
            None => Some(cand),
            Some(cur) => {
                let better = if (cand.0 - cur.0).abs() <= THROW_TIE_EPS {
                    (cand.1, cand.2) < (cur.1, cur.2)
                } else {
                    cand.0 < cur.0
                };
                Some(if better { cand } else { cur })
            }
        };
    }
    best.map(|(_, _, id)| id)
}
