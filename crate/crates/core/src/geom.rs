//! Small rigid-body helpers on top of nalgebra.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Rotation (unit quaternion) followed by translation, mapping local to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quat::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Quat::identity(), t)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        quat_to_wxyz(&self.rotation)
    }
}

pub fn quat_to_wxyz(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Build a unit quaternion from `[w, x, y, z]`. Inputs already unit to
/// within rounding are kept bit-for-bit so stored poses reload exactly.
pub fn quat_from_wxyz(q: [f64; 4]) -> Quat {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    if (raw.norm_squared() - 1.0).abs() < 1e-12 {
        Unit::new_unchecked(raw)
    } else {
        Unit::new_normalize(raw)
    }
}

/// Rotation whose columns are the given right-handed orthonormal axes.
pub fn quat_from_axes(x: &Vec3, y: &Vec3, z: &Vec3) -> Quat {
    let m = nalgebra::Matrix3::from_columns(&[*x, *y, *z]);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
    UnitQuaternion::from_rotation_matrix(&rot)
}

/// Any unit vector orthogonal to `v`.
pub fn orthogonal(v: &Vec3) -> Vec3 {
    let a = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&a).normalize()
}

#[derive(Serialize, Deserialize)]
pub(crate) struct TransformRepr {
    pub quat: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformRepr {
    fn from(t: &RigidTransform) -> Self {
        Self {
            quat: t.quat_wxyz(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl From<&TransformRepr> for RigidTransform {
    fn from(r: &TransformRepr) -> Self {
        RigidTransform::new(quat_from_wxyz(r.quat), Vec3::from(r.translation))
    }
}
