//! Camera conventions, poses and 2D similarity fitting.
//!
//! All reconstructions use an orthographic camera whose frame is aligned
//! with the image: `x` to the right, `y` down the rows, `z` toward the
//! viewer (larger depth is nearer). Pixel centers sit on integer
//! coordinates and camera-frame `x`/`y` are measured from the image center
//! `((w - 1) / 2, (h - 1) / 2)` in pixel units. A visible surface has a
//! normal with positive `z`.

use nalgebra::{Isometry3, Point2, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World-to-camera rigid transform.
pub type Pose = Isometry3<f64>;

/// Rotation of the head by `degrees` of yaw about the vertical (image `y`) axis.
pub fn yaw_rotation(degrees: f64) -> Rotation3<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
}

/// Nominal world-to-camera pose for a view cluster at the given azimuth.
pub fn nominal_pose(degrees: f64) -> Pose {
    Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_rotation_matrix(&yaw_rotation(degrees)),
    )
}

/// Yaw (degrees) of a pose, read from the rotated world `x` axis.
pub fn pose_yaw_degrees(pose: &Pose) -> f64 {
    let m = pose.rotation.to_rotation_matrix();
    let m = m.matrix();
    // column 0 is R * e_x = (cos, 0, -sin) for a pure yaw.
    (-m[(2, 0)]).atan2(m[(0, 0)]).to_degrees()
}

/// Image center of a `width x height` grid in pixel coordinates.
#[inline]
pub fn image_center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) * 0.5, (height as f64 - 1.0) * 0.5)
}

/// Camera-frame point of pixel `(x, y)` at depth `z`.
#[inline]
pub fn pixel_to_camera(x: f64, y: f64, z: f64, center: (f64, f64)) -> Point3<f64> {
    Point3::new(x - center.0, y - center.1, z)
}

/// Pixel coordinates and depth of a camera-frame point.
#[inline]
pub fn camera_to_pixel(p: &Point3<f64>, center: (f64, f64)) -> (f64, f64, f64) {
    (p.x + center.0, p.y + center.1, p.z)
}

/// 2D similarity `p' = s R(theta) p + t`, stored as `a = s cos`, `b = s sin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2 {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity2 {
    pub fn identity() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn from_params(scale: f64, angle_rad: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle_rad.cos(),
            b: scale * angle_rad.sin(),
            tx,
            ty,
        }
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn angle(&self) -> f64 {
        self.b.atan2(self.a)
    }

    #[inline]
    pub fn apply(&self, p: Point2<f64>) -> Point2<f64> {
        Point2::new(
            self.a * p.x - self.b * p.y + self.tx,
            self.b * p.x + self.a * p.y + self.ty,
        )
    }

    pub fn inverse(&self) -> Self {
        let d = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / d, -self.b / d);
        Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Similarity2) -> Self {
        Self {
            a: self.a * other.a - self.b * other.b,
            b: self.b * other.a + self.a * other.b,
            tx: self.a * other.tx - self.b * other.ty + self.tx,
            ty: self.b * other.tx + self.a * other.ty + self.ty,
        }
    }

    /// Largest parameter-wise deviation from another similarity.
    pub fn max_param_diff(&self, other: &Similarity2) -> f64 {
        [
            self.a - other.a,
            self.b - other.b,
            self.tx - other.tx,
            self.ty - other.ty,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.max_param_diff(&Similarity2::identity()) <= tol
    }
}

/// Relative size of the minor axis of a point set's scatter; zero for
/// collinear or coincident points.
fn spread_ratio(points: &[Point2<f64>]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr * 0.25 - det).max(0.0).sqrt();
    let major = tr * 0.5 + disc;
    let minor = (tr * 0.5 - disc).max(0.0);
    (major, minor)
}

/// Least-squares similarity mapping `src` onto `dst` (closed-form Procrustes
/// with uniform scale).
pub fn fit_similarity(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<Similarity2> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(Error::DegenerateFiducials(format!(
            "need matching point sets of at least 2 points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let (major, minor) = spread_ratio(src);
    if major <= 1e-18 {
        return Err(Error::DegenerateFiducials("source points coincide".into()));
    }
    if minor <= 1e-9 * major {
        return Err(Error::DegenerateFiducials("source points are collinear".into()));
    }
    let n = src.len() as f64;
    let (sx, sy) = (
        src.iter().map(|p| p.x).sum::<f64>() / n,
        src.iter().map(|p| p.y).sum::<f64>() / n,
    );
    let (dx, dy) = (
        dst.iter().map(|p| p.x).sum::<f64>() / n,
        dst.iter().map(|p| p.y).sum::<f64>() / n,
    );
    let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (ux, uy) = (s.x - sx, s.y - sy);
        let (vx, vy) = (d.x - dx, d.y - dy);
        num_a += ux * vx + uy * vy;
        num_b += ux * vy - uy * vx;
        den += ux * ux + uy * uy;
    }
    let a = num_a / den;
    let b = num_b / den;
    Ok(Similarity2 {
        a,
        b,
        tx: dx - (a * sx - b * sy),
        ty: dy - (b * sx + a * sy),
    })
}

/// Root-mean-square distance between corresponding points.
pub fn rms_distance(a: &[Point2<f64>], b: &[Point2<f64>]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (sum / a.len().max(1) as f64).sqrt()
}

/// Unit normal of triangle `(a, b, c)` oriented toward the camera (`z >= 0`).
pub fn facing_normal(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<Vector3<f64>> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len <= 1e-300 {
        return None;
    }
    let n = n / len;
    Some(if n.z < 0.0 { -n } else { n })
}

/// Angle between two unit vectors, in degrees.
pub fn angle_degrees(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}
