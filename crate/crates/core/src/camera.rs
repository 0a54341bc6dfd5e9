//! Pinhole cameras, rigs and 2D-3D correspondences.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Rotation};
use crate::scalar::Real;

/// Points closer than this (along the optical axis) are treated as not projectable.
pub const MIN_DEPTH: f64 = 0.1;

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Self {
        Self { fx, fy, cx, cy, width, height }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > T::zero() && self.fy > T::zero() && self.width > 0 && self.height > 0
    }

    /// Pixel of a camera-frame point, `None` behind (or too close to) the camera.
    pub fn project(&self, p_cam: &Vector3<T>) -> Option<Vector2<T>> {
        if p_cam.z < T::lit(MIN_DEPTH) {
            return None;
        }
        Some(self.project_unchecked(p_cam))
    }

    pub fn project_unchecked(&self, p_cam: &Vector3<T>) -> Vector2<T> {
        Vector2::new(self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy)
    }

    /// Jacobian of [`Self::project_unchecked`] with respect to the camera-frame point.
    pub fn projection_jacobian(&self, p_cam: &Vector3<T>) -> Matrix2x3<T> {
        let iz = T::one() / p_cam.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            T::zero(),
            -self.fx * p_cam.x * iz2,
            T::zero(),
            self.fy * iz,
            -self.fy * p_cam.y * iz2,
        )
    }

    /// Normalized image coordinate `K⁻¹ [u, v, 1]ᵀ`.
    pub fn normalized(&self, pixel: &Vector2<T>) -> Vector3<T> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, T::one())
    }

    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero()
            && pixel.y >= T::zero()
            && pixel.x < T::lit(self.width as f64)
            && pixel.y < T::lit(self.height as f64)
    }

    /// Smaller of the two focal lengths, used to convert pixel bounds into angles.
    pub fn min_focal(&self) -> T {
        self.fx.min(self.fy)
    }
}

/// One camera of a rigidly mounted rig.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T: Real> {
    pub id: usize,
    pub intrinsics: Intrinsics<T>,
    /// Camera pose in the IMU frame, `imu_t_cam`.
    pub imu_t_cam: RigidTransform<T>,
}

impl<T: Real> CameraModel<T> {
    pub fn new(id: usize, intrinsics: Intrinsics<T>, imu_t_cam: RigidTransform<T>) -> Self {
        Self { id, intrinsics, imu_t_cam }
    }

    /// Pixel of a world point given the IMU pose `world_t_imu`.
    pub fn project_world(&self, world_t_imu: &RigidTransform<T>, p_world: &Vector3<T>) -> Option<Vector2<T>> {
        let cam_t_world = (*world_t_imu * self.imu_t_cam).inverse();
        let p = cam_t_world.transform_point(p_world);
        let px = self.intrinsics.project(&p)?;
        self.intrinsics.contains(&px).then_some(px)
    }
}

/// Camera rotation in a forward-left-up body frame for a camera looking along body `x`
/// rotated by `yaw` about body `z` (camera axes: `x` right, `y` down, `z` forward).
pub fn body_camera_rotation<T: Real>(yaw: T) -> Rotation<T> {
    #[rustfmt::skip]
    let forward = nalgebra::Matrix3::new(
        T::zero(), T::zero(), T::one(),
        -T::one(), T::zero(), T::zero(),
        T::zero(), -T::one(), T::zero(),
    );
    Rotation::from_yaw(yaw) * Rotation::from_matrix(&forward)
}

/// A 2D observation paired with a 3D map point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence<T: Real> {
    pub camera: usize,
    pub map: u32,
    pub landmark: u32,
    pub pixel: Vector2<T>,
    /// Map point in its map frame.
    pub point: Vector3<T>,
    /// Matching confidence in `[0, 1]`.
    pub weight: T,
    /// Ground truth label; only meaningful for simulated data.
    pub inlier: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn k() -> Intrinsics<f64> {
        Intrinsics::new(400.0, 410.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let px = k().project(&Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(px, Vector2::new(320.0, 240.0));
        assert!(k().project(&Vector3::new(0.0, 0.0, -5.0)).is_none());
    }

    #[test]
    fn normalized_inverts_projection() {
        let p = Vector3::new(0.4, -0.3, 2.0);
        let px = k().project(&p).unwrap();
        assert_relative_eq!(k().normalized(&px) * 2.0, p, epsilon = 1e-12);
    }

    #[test]
    fn projection_jacobian_matches_finite_difference() {
        let p = Vector3::new(0.4, -0.3, 2.0);
        let j = k().projection_jacobian(&p);
        let eps = 1e-6;
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = eps;
            let num = (k().project_unchecked(&(p + d)) - k().project_unchecked(&(p - d))) / (2.0 * eps);
            assert_relative_eq!(num, j.column(c).into_owned(), epsilon = 1e-5);
        }
    }

    #[test]
    fn forward_camera_looks_along_body_x() {
        let r = body_camera_rotation::<f64>(0.0);
        assert_relative_eq!(r.rotate(&Vector3::z()), Vector3::x(), epsilon = 1e-12);
        assert_relative_eq!(r.rotate(&Vector3::y()), -Vector3::z(), epsilon = 1e-12);
        let left = body_camera_rotation::<f64>(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(left.rotate(&Vector3::z()), Vector3::y(), epsilon = 1e-12);
    }
}
