//! Quaternion and rigid-transform algebra for the arm branch.
//!
//! Conventions: Hamilton product, scalar-first storage `(w, x, y, z)`, active
//! rotations (`q.rotate(v)` rotates the vector, it does not change basis).
//! Quaternions returned by the constructors and operations in this module are
//! unit length to within `1e-9`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Unit quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a quaternion from raw components and normalizes it.
    ///
    /// A zero quaternion normalizes to the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }.normalized()
    }

    /// Raw constructor, no normalization.
    pub const fn from_raw(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_wxyz(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_wxyz(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let a = axis / n;
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map of a rotation vector (axis times angle).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    /// Fixed-axis roll/pitch/yaw: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let qx = Self::from_axis_angle(&Vector3::x(), roll);
        let qy = Self::from_axis_angle(&Vector3::y(), pitch);
        let qz = Self::from_axis_angle(&Vector3::z(), yaw);
        qz.mul(&qy).mul(&qx)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn conjugate(&self) -> Self {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Hamilton product `self ⊗ rhs`, renormalized.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .normalized()
    }

    /// Picks the representative with `w >= 0`.
    pub fn canonicalize(self) -> Self {
        if self.w < 0.0 {
            Quat {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let c = self.canonicalize();
        2.0 * c.vector_part().norm().atan2(c.w)
    }

    /// Logarithm as a rotation vector with angle in `[0, π]`.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let c = self.canonicalize();
        let v = c.vector_part();
        let s = v.norm();
        if s < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * s.atan2(c.w);
        v * (angle / s)
    }

    /// Geodesic angle between two orientations.
    pub fn angle_to(&self, other: &Quat) -> f64 {
        other.mul(&self.inverse()).angle()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // v' = v + 2w (u × v) + 2 u × (u × v)
        let u = self.vector_part();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Nearest unit quaternion to a rotation matrix, Shepperd branch selection,
    /// canonicalized to `w >= 0`.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let diag = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let q = if trace >= diag[0] && trace >= diag[1] && trace >= diag[2] {
            let s = 2.0 * (1.0 + trace).sqrt();
            Quat::from_raw(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if diag[0] >= diag[1] && diag[0] >= diag[2] {
            let s = 2.0 * (1.0 + diag[0] - diag[1] - diag[2]).sqrt();
            Quat::from_raw(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if diag[1] >= diag[2] {
            let s = 2.0 * (1.0 + diag[1] - diag[0] - diag[2]).sqrt();
            Quat::from_raw(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + diag[2] - diag[0] - diag[1]).sqrt();
            Quat::from_raw(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonicalize()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rigid transform: position in meters plus unit orientation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub q: Quat,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            p: Vector3::zeros(),
            q: Quat::IDENTITY,
        }
    }

    pub fn new(p: Vector3<f64>, q: Quat) -> Self {
        Pose { p, q: q.normalized() }
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Pose {
            p,
            q: Quat::IDENTITY,
        }
    }

    /// `self * rhs`: applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            p: self.p + self.q.rotate(&rhs.p),
            q: self.q.mul(&rhs.q),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.inverse();
        Pose {
            p: -qi.rotate(&self.p),
            q: qi,
        }
    }

    pub fn transform_point(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.p + self.q.rotate(v)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.q.to_rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.p);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Pose {
            p: m.fixed_view::<3, 1>(0, 3).into_owned(),
            q: Quat::from_rotation_matrix(&r),
        }
    }

    /// Translation distance and geodesic angle to `other`.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        ((self.p - other.p).norm(), self.q.angle_to(&other.q))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrameMapError {
    #[error("frame map is not orthonormal (max |R Rᵀ - I| = {0:e})")]
    NotOrthonormal(f64),
}

/// Rotation taking operator (tracking) coordinates into robot base
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMap {
    r: Matrix3<f64>,
}

impl FrameMap {
    pub const DEFAULT_NAME: &'static str = "lefranx-default";

    /// Accepts any orthonormal matrix. Reflections are allowed (the default
    /// has det -1); conjugating a rotation by one still yields a rotation.
    pub fn new(r: Matrix3<f64>) -> Result<Self, FrameMapError> {
        let ortho = (r * r.transpose() - Matrix3::identity()).amax();
        if ortho > 1e-12 {
            return Err(FrameMapError::NotOrthonormal(ortho));
        }
        Ok(FrameMap { r })
    }

    /// Tracking y-up/-z-forward to robot z-up/x-forward:
    /// `[[0,0,1],[-1,0,0],[0,1,0]]`.
    pub fn standard() -> Self {
        FrameMap {
            r: Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        }
    }

    pub fn identity() -> Self {
        FrameMap {
            r: Matrix3::identity(),
        }
    }

    /// Looks up a named preset.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            Self::DEFAULT_NAME => Some(Self::standard()),
            "identity" => Some(Self::identity()),
            _ => None,
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn is_proper(&self) -> bool {
        self.r.determinant() > 0.0
    }
}

impl Default for FrameMap {
    fn default() -> Self {
        Self::standard()
    }
}

/// Relative wrist motion since engagement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferentialIntent {
    pub dp: Vector3<f64>,
    pub dq: Quat,
}

impl DifferentialIntent {
    pub fn zero() -> Self {
        DifferentialIntent {
            dp: Vector3::zeros(),
            dq: Quat::IDENTITY,
        }
    }
}

/// Translation increment and world-frame (left) orientation increment
/// `q_t ⊗ q_0⁻¹` of the wrist.
pub fn compute_intent(wrist_0: &Pose, wrist_t: &Pose) -> DifferentialIntent {
    DifferentialIntent {
        dp: wrist_t.p - wrist_0.p,
        dq: wrist_t.q.mul(&wrist_0.q.inverse()),
    }
}

/// Expresses an intent in robot base coordinates: `R dp` and `R R(dq) Rᵀ`.
pub fn map_intent(intent: &DifferentialIntent, fm: &FrameMap) -> DifferentialIntent {
    let r = fm.matrix();
    let rd = intent.dq.to_rotation_matrix();
    let mapped = r * rd * r.transpose();
    DifferentialIntent {
        dp: r * intent.dp,
        dq: Quat::from_rotation_matrix(&mapped),
    }
}

/// Displaces the engagement end-effector pose by a base-frame intent.
pub fn compose_target(ee_0: &Pose, mapped: &DifferentialIntent) -> Pose {
    Pose {
        p: ee_0.p + mapped.dp,
        q: mapped.dq.mul(&ee_0.q),
    }
}
