use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(repr: TransformRepr) -> Result<Self> {
        let r = &repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        RigidTransform::new(rotation, Vector3::from(repr.translation))
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        TransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Builds a transform, checking orthonormality and `det = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::Invariant("non-finite rigid transform".into()));
        }
        let ortho = rotation.transpose() * rotation - Matrix3::identity();
        if ortho.amax() > ROTATION_TOL {
            return Err(Error::Invariant(format!(
                "rotation is not orthonormal (max deviation {:e})",
                ortho.amax()
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::Invariant(format!("rotation determinant {det} != 1")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::from_parts_unchecked(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_parts_unchecked(Matrix3::identity(), t)
    }

    /// Rotation about +z by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_parts_unchecked(
            *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix(),
            Vector3::zeros(),
        )
    }

    /// Rotation by `angle` radians about an arbitrary axis, followed by a translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::from_parts_unchecked(
            *Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation,
        )
    }

    /// Planar pose: yaw about +z then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let mut t = Self::rot_z(yaw);
        t.translation = translation;
        t
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_all(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// Rotates a direction without translating it.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::from_parts_unchecked(rt, -(rt * self.translation))
    }

    /// Yaw angle of a planar rotation.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Rotation angle (radians) of the rotation part, in `[0, pi]`.
    ///
    /// Uses both the trace and the skew part so that tiny angles keep full precision.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Row-major `[R | t]` as 12 numbers.
    pub fn to_array12(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub(crate) fn from_array12_unchecked(a: &[f64]) -> Self {
        Self::from_parts_unchecked(
            Matrix3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]),
            Vector3::new(a[3], a[7], a[11]),
        )
    }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::from_parts_unchecked(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        compose(&self, &rhs)
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub(crate) fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = 0.5 * (r.trace() - 1.0);
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * skew.norm();
    sin.atan2(cos)
}

/// Motion of static world points between two world-from-sensor poses:
/// maps coordinates in the `prev` sensor frame to the `next` sensor frame.
pub fn relative_motion(prev: &RigidTransform, next: &RigidTransform) -> RigidTransform {
    compose(&next.inverse(), prev)
}

/// Per-point flow induced by a rigid transform: `f_i = R c_i + t - c_i`.
pub fn rigid_flow(t: &RigidTransform, coords: &[Point3]) -> Vec<Vector3<f64>> {
    coords.iter().map(|c| t.apply(c) - c).collect()
}

/// Relative translation error (m) and relative angular error (degrees).
pub fn rte_rae(estimate: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    let rte = (estimate.translation - truth.translation).norm();
    let delta = estimate.rotation * truth.rotation.transpose();
    (rte, rotation_angle(&delta).to_degrees())
}
