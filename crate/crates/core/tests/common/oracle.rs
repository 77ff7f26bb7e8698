//! Reference computations written independently of the library's math.

use nalgebra::{Isometry3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};

/// The combined rotation matrix written out entry by entry.
pub fn expanded_rotation(alpha: f64, beta: f64, gamma: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    [
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
        [-sb, cb * sg, cb * cg],
    ]
}

/// Z, then Y, then X elementary rotations multiplied by nalgebra.
pub fn product_rotation(alpha: f64, beta: f64, gamma: f64) -> [[f64; 3]; 3] {
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), alpha)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), beta)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), gamma);
    let m = r.matrix();
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

pub fn max_abs_diff(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[i][j] - b[i][j]).abs());
        }
    }
    worst
}

/// Rigid device frame built with nalgebra from a center and yaw/pitch/roll.
pub fn device_frame(center: [f64; 3], alpha: f64, beta: f64, gamma: f64) -> Isometry3<f64> {
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), alpha)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), beta)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), gamma);
    Isometry3::from_parts(Translation3::new(center[0], center[1], center[2]), rot)
}

/// Screen pixel to table coordinates: origin at the screen center, x to the
/// right, y toward the top edge, then through the device frame.
pub fn px_to_table(frame: &Isometry3<f64>, screen: [f64; 4], px: (f64, f64)) -> Point3<f64> {
    let [w_px, h_px, w_mm, h_mm] = screen;
    let local = Point3::new((px.0 - w_px / 2.0) * w_mm / w_px, (h_px / 2.0 - px.1) * h_mm / h_px, 0.0);
    frame * local
}

pub fn distance_to_line(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let d = b - a;
    (p - a).cross(&d).norm() / d.norm()
}

/// Throw target by rotating the table so the throw heads along +x: a
/// device qualifies when it lies strictly ahead (x > 0); the smallest
/// off-axis angle wins, near ties go to the closer device, then the
/// lower id.
pub fn brute_force_target(source: (f64, f64), others: &[(u32, f64, f64)], theta: f64) -> Option<u32> {
    let (c, s) = (theta.cos(), theta.sin());
    let mut best: Option<(f64, f64, u32)> = None;
    for &(id, x, y) in others {
        let (dx, dy) = (x - source.0, y - source.1);
        let ahead = dx * c + dy * s;
        let side = -dx * s + dy * c;
        if ahead <= 0.0 {
            continue;
        }
        let off_axis = side.abs().atan2(ahead);
        let dist = dx.hypot(dy);
        let better = match best {
            None => true,
            Some((a, d, i)) => {
                if (off_axis - a).abs() <= 1e-9 {
                    (dist, id) < (d, i)
                } else {
                    off_axis < a
                }
            }
        };
        if better {
            best = Some((off_axis, dist, id));
        }
    }
    best.map(|b| b.2)
}
