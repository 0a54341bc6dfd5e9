//! SO(3)/SE(3) primitives and the 4DoF yaw pose.
//!
//! Frame notation follows `a_t_b`: the transform taking coordinates expressed in frame `b`
//! into frame `a`, so `a_t_c = a_t_b * b_t_c` and `a_t_b.transform_point(p_b) = p_a`.
//!
//! # Quaternion convention
//!
//! Quaternions exchanged with the outside world (map files, state logs) use the JPL
//! convention with scalar-last storage `[x, y, z, w]`. For a JPL quaternion `q̄ = [q; q4]`
//! the rotation matrix is
//!
//! ```text
//! C(q̄) = (2 q4² − 1) I − 2 q4 ⌊q×⌋ + 2 q qᵀ
//! ```
//!
//! which is the transpose of the Hamilton matrix built from the same four numbers.
//! Worked example: a +90° yaw `R` mapping the x axis onto the y axis is the Hamilton
//! quaternion `(x, y, z, w) = (0, 0, 0.7071, 0.7071)` and the JPL quaternion
//! `[0, 0, −0.7071, 0.7071]`. Internally a Hamilton [`UnitQuaternion`] is stored and the
//! conversion happens only in [`Rotation::from_jpl`] / [`Rotation::to_jpl`].
//!
//! The local frame and every map frame are gravity aligned with `z` up; gravity is
//! [`gravity()`] `= (0, 0, −9.81)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::Real;

/// Magnitude of gravity in m/s². The simulator and the filter both read this constant.
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

/// Gravity vector in any gravity-aligned frame.
pub fn gravity<T: Real>() -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), -T::lit(GRAVITY_MAGNITUDE))
}

/// Wraps an angle to `[−π, π]`.
pub fn normalize_angle<T: Real>(angle: T) -> T {
    let two_pi = T::two_pi();
    let mut a = angle % two_pi;
    if a > T::pi() {
        a -= two_pi;
    } else if a < -T::pi() {
        a += two_pi;
    }
    a
}

/// Skew-symmetric matrix `⌊v×⌋` with `⌊v×⌋ w = v × w`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(T::zero(), -v.z, v.y, v.z, T::zero(), -v.x, -v.y, v.x, T::zero())
}

/// Right Jacobian of SO(3).
pub fn right_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < T::lit(1e-7) {
        return Matrix3::identity() - k * T::lit(0.5);
    }
    let t2 = theta * theta;
    Matrix3::identity() - k * ((T::one() - theta.cos()) / t2) + k * k * ((theta - theta.sin()) / (t2 * theta))
}

/// A 3D rotation, stored as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation<T: Real> {
    q: UnitQuaternion<T>,
}

impl<T: Real> Default for Rotation<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Self { q: UnitQuaternion::identity() }
    }

    fn from_unit(q: UnitQuaternion<T>) -> Self {
        Self { q: UnitQuaternion::new_normalize(q.into_inner()) }
    }

    /// Builds a rotation from JPL components `[x, y, z, w]`.
    ///
    /// Components already within `1e-12` of unit norm are kept bit-exact; anything else is
    /// renormalized. Returns `None` for a zero or non-finite quaternion.
    pub fn from_jpl(jpl: [T; 4]) -> Option<Self> {
        let q = Quaternion::new(jpl[3], -jpl[0], -jpl[1], -jpl[2]);
        let norm = q.norm();
        if !norm.is_finite() || norm <= T::default_epsilon() {
            return None;
        }
        if (norm - T::one()).abs() <= T::lit(1e-12) {
            Some(Self { q: UnitQuaternion::new_unchecked(q) })
        } else {
            Some(Self { q: UnitQuaternion::new_normalize(q) })
        }
    }

    /// JPL components `[x, y, z, w]` of this rotation.
    pub fn to_jpl(&self) -> [T; 4] {
        let q = self.q.quaternion();
        [-q.i, -q.j, -q.k, q.w]
    }

    /// Hamilton components `[x, y, z, w]` (the order used by TUM-style trajectory files).
    pub fn to_hamilton(&self) -> [T; 4] {
        let q = self.q.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_hamilton(xyzw: [T; 4]) -> Option<Self> {
        Self::from_jpl([-xyzw[0], -xyzw[1], -xyzw[2], xyzw[3]])
    }

    /// Closest rotation to an (approximately) orthogonal matrix.
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        let r = nalgebra::Rotation3::from_matrix_eps(m, T::lit(1e-15), 100, nalgebra::Rotation3::identity());
        Self::from_unit(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn matrix(&self) -> Matrix3<T> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// Exponential map of a rotation vector (axis × angle).
    pub fn exp(v: &Vector3<T>) -> Self {
        Self::from_unit(UnitQuaternion::from_scaled_axis(*v))
    }

    /// Rotation vector of this rotation, angle in `[0, π]`.
    pub fn log(&self) -> Vector3<T> {
        self.q.scaled_axis()
    }

    /// Rotation by `alpha` radians about the gravity (`z`) axis.
    pub fn from_yaw(alpha: T) -> Self {
        let half = alpha * T::lit(0.5);
        Self { q: UnitQuaternion::new_unchecked(Quaternion::new(half.cos(), T::zero(), T::zero(), half.sin())) }
    }

    /// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler_zyx(yaw: T, pitch: T, roll: T) -> Self {
        Self::from_unit(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    /// Yaw of the ZYX decomposition, in `[−π, π]`.
    pub fn yaw(&self) -> T {
        let m = self.matrix();
        normalize_angle(m[(1, 0)].atan2(m[(0, 0)]))
    }

    /// This rotation with its ZYX yaw removed, i.e. `Rz(−yaw) · R`.
    pub fn without_yaw(&self) -> Self {
        Self::from_yaw(-self.yaw()) * *self
    }

    pub fn inverse(&self) -> Self {
        Self { q: self.q.inverse() }
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.q.transform_vector(v)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> T {
        self.q.angle()
    }

    /// Geodesic distance to `other`.
    pub fn angle_to(&self, other: &Self) -> T {
        (self.inverse() * *other).angle()
    }

    pub fn quaternion_norm(&self) -> T {
        self.q.quaternion().norm()
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        let j = self.to_jpl();
        Rotation::<U>::from_jpl(j.map(|x| U::lit(x.as_f64()))).expect("unit quaternion")
    }
}

impl<T: Real + Serialize> Serialize for Rotation<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_jpl().serialize(serializer)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for Rotation<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let jpl = <[T; 4]>::deserialize(deserializer)?;
        Rotation::from_jpl(jpl).ok_or_else(|| D::Error::custom("degenerate quaternion"))
    }
}

impl<T: Real> Mul for Rotation<T> {
    type Output = Rotation<T>;

    fn mul(self, rhs: Self) -> Self {
        Self::from_unit(self.q * rhs.q)
    }
}

/// Rigid body transform `a_t_b = [R | p]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform<T: Real> {
    pub rotation: Rotation<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn new(rotation: Rotation<T>, translation: Vector3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self { translation: -rotation.rotate(&self.translation), rotation }
    }

    /// `R p + t`.
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<T>) -> Self {
        let r: Matrix3<T> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self::new(Rotation::from_matrix(&r), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform::new(self.rotation.cast(), self.translation.map(|x| U::lit(x.as_f64())))
    }
}

impl<T: Real> Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

/// Gravity-aligned 4DoF pose: a yaw about `z` plus a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YawPose<T: Real> {
    /// Radians, always in `[−π, π]`.
    pub yaw: T,
    pub translation: Vector3<T>,
}

impl<T: Real> YawPose<T> {
    pub fn new(yaw: T, translation: Vector3<T>) -> Self {
        Self { yaw: normalize_angle(yaw), translation }
    }

    pub fn rotation(&self) -> Rotation<T> {
        Rotation::from_yaw(self.yaw)
    }

    pub fn to_transform(&self) -> RigidTransform<T> {
        RigidTransform::new(self.rotation(), self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z) + self.translation
    }
}
