//! Minimal pose math: 3-vectors, unit quaternions and rigid poses.
//!
//! Quaternions are always laid out as `(w, x, y, z)`.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Norm below which a raw quaternion is treated as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("quaternion norm is below {ZERO_NORM_EPS:e}; cannot normalize")]
    ZeroNorm,
    #[error("non-finite component in quaternion")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
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

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self + (o - self).scale(t)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(s: &[f64]) -> Vec3 {
        Vec3::new(s[0], s[1], s[2])
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

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.scale(s)
    }
}

/// A rotation quaternion with norm 1 (to within 1e-6).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self, GeometryError> {
        let n = axis.norm();
        if n < ZERO_NORM_EPS {
            return Err(GeometryError::ZeroNorm);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis.scale(s / n);
        normalize_quaternion([c, a.x, a.y, a.z])
    }

    /// Wraps components that are already known to be unit length.
    ///
    /// Used on hot paths where the caller has just normalized; debug builds
    /// still check the invariant.
    pub fn from_unit_components(c: [f64; 4]) -> Self {
        debug_assert!(
            (c.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6,
            "not a unit quaternion: {c:?}"
        );
        Self {
            w: c[0],
            x: c[1],
            y: c[2],
            z: c[3],
        }
    }

    pub fn components(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn w(self) -> f64 {
        self.w
    }

    pub fn dot(self, o: UnitQuat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn neg(self) -> UnitQuat {
        UnitQuat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn conjugate(self) -> UnitQuat {
        UnitQuat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * o`, renormalized to absorb rounding drift.
    pub fn mul(self, o: UnitQuat) -> UnitQuat {
        let raw = [
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        ];
        normalize_quaternion(raw).unwrap_or(UnitQuat::IDENTITY)
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        rotate(self, v)
    }
}

/// Scales a raw 4-vector `(w, x, y, z)` to unit length.
pub fn normalize_quaternion(raw: [f64; 4]) -> Result<UnitQuat, GeometryError> {
    if raw.iter().any(|c| !c.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    // Scale by the largest magnitude first so tiny or huge inputs do not
    // underflow or overflow while squaring.
    let max = raw.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max == 0.0 {
        return Err(GeometryError::ZeroNorm);
    }
    let scaled = raw.map(|c| c / max);
    let norm = scaled.iter().map(|c| c * c).sum::<f64>().sqrt() * max;
    if norm < ZERO_NORM_EPS {
        return Err(GeometryError::ZeroNorm);
    }
    let inv = 1.0 / (norm / max);
    let q = scaled.map(|c| c * inv);
    Ok(UnitQuat {
        w: q[0],
        x: q[1],
        y: q[2],
        z: q[3],
    })
}

/// Rotates `v` by `q` using `v' = v + 2w(u × v) + 2u × (u × v)`.
pub fn rotate(q: UnitQuat, v: Vec3) -> Vec3 {
    let u = Vec3::new(q.x, q.y, q.z);
    let t = u.cross(v).scale(2.0);
    v + t.scale(q.w) + u.cross(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuat,
}

impl Pose {
    pub const fn new(position: Vec3, orientation: UnitQuat) -> Self {
        Self { position, orientation }
    }

    /// Transforms a point from the pose's local frame into its parent frame.
    pub fn transform_point(&self, local: Vec3) -> Vec3 {
        self.position + rotate(self.orientation, local)
    }
}
