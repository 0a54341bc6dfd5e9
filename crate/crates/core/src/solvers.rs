//! Gravity-aligned 4DoF pose solvers and RANSAC matching.
//!
//! All solvers work in a *query frame* `Q`: gravity aligned, with its yaw equal to the
//! current body yaw and its origin at the center of a reference camera. Correspondences
//! from any camera of a rigid rig are expressed as rays `center + s·bearing` in `Q`, which
//! makes the single-camera two-point solver and its multi-camera generalisation the same
//! code path. The unknown is `q_t_map = [Rz(α) | t]`, the map frame seen from `Q`.

use nalgebra::{Matrix2x4, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraModel, Correspondence, Intrinsics};
use crate::geometry::{normalize_angle, RigidTransform, Rotation, YawPose};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("no real solution")]
    NoSolution,
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("best consensus {best} is below the required {required}")]
    NoConsensus { best: usize, required: usize },
    #[error("correspondence {index} references unknown camera {camera}")]
    UnknownCamera { index: usize, camera: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Gravity-aligned frame shared by all cameras of a rig at one query timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFrame<T: Real> {
    q_t_imu: RigidTransform<T>,
    cameras: Vec<CameraModel<T>>,
}

impl<T: Real> QueryFrame<T> {
    /// `attitude` is the IMU orientation in any gravity-aligned frame; only its roll and
    /// pitch are used. `reference` indexes the camera whose center becomes the origin.
    pub fn new(attitude: &Rotation<T>, rig: &[CameraModel<T>], reference: usize) -> Result<Self, SolverError> {
        let reference_cam = rig
            .get(reference)
            .ok_or_else(|| SolverError::InvalidConfig(format!("reference camera {reference} not in rig")))?;
        let q_r_imu = attitude.without_yaw();
        let q_t_imu = RigidTransform::new(q_r_imu, -q_r_imu.rotate(&reference_cam.imu_t_cam.translation));
        Ok(Self { q_t_imu, cameras: rig.to_vec() })
    }

    pub fn q_t_imu(&self) -> &RigidTransform<T> {
        &self.q_t_imu
    }

    pub fn cameras(&self) -> &[CameraModel<T>] {
        &self.cameras
    }

    /// IMU pose in the map frame implied by a solved `q_t_map`.
    pub fn map_t_imu(&self, q_t_map: &YawPose<T>) -> RigidTransform<T> {
        q_t_map.to_transform().inverse() * self.q_t_imu
    }

    /// The `q_t_map` consistent with a (gravity-aligned) IMU pose in the map frame.
    pub fn yaw_pose_from(&self, map_t_imu: &RigidTransform<T>) -> YawPose<T> {
        let q_t_map = (*map_t_imu * self.q_t_imu.inverse()).inverse();
        YawPose::new(q_t_map.rotation.yaw(), q_t_map.translation)
    }

    /// Expresses correspondence `index` as a ray in this frame.
    pub fn observation(&self, index: usize, corr: &Correspondence<T>) -> Result<Observation<T>, SolverError> {
        let cam = self.cameras.get(corr.camera).ok_or(SolverError::UnknownCamera { index, camera: corr.camera })?;
        let q_t_cam = self.q_t_imu * cam.imu_t_cam;
        let q_r_cam = q_t_cam.rotation.matrix();
        let bearing = q_r_cam * cam.intrinsics.normalized(&corr.pixel).normalize();
        Ok(Observation {
            index,
            camera: corr.camera,
            point: corr.point,
            center: q_t_cam.translation,
            bearing,
            cam_r_q: q_r_cam.transpose(),
            intrinsics: cam.intrinsics,
            pixel: corr.pixel,
            weight: corr.weight,
        })
    }

    pub fn observations(&self, corrs: &[Correspondence<T>]) -> Result<Vec<Observation<T>>, SolverError> {
        corrs.iter().enumerate().map(|(i, c)| self.observation(i, c)).collect()
    }
}

/// A correspondence expressed as a ray in the query frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation<T: Real> {
    /// Position in the caller's correspondence list.
    pub index: usize,
    pub camera: usize,
    /// Map point in the map frame.
    pub point: Vector3<T>,
    /// Camera center in the query frame.
    pub center: Vector3<T>,
    /// Unit viewing direction in the query frame.
    pub bearing: Vector3<T>,
    pub cam_r_q: Matrix3<T>,
    pub intrinsics: Intrinsics<T>,
    pub pixel: Vector2<T>,
    pub weight: T,
}

impl<T: Real> Observation<T> {
    pub fn point_in_camera(&self, q_t_map: &YawPose<T>) -> Vector3<T> {
        self.cam_r_q * (q_t_map.transform_point(&self.point) - self.center)
    }

    /// Pixel distance between the measurement and the projected map point, `None` if the
    /// point falls behind the camera.
    pub fn reprojection_error(&self, q_t_map: &YawPose<T>) -> Option<T> {
        let px = self.intrinsics.project(&self.point_in_camera(q_t_map))?;
        Some((px - self.pixel).norm())
    }

    /// Pixel residual and its Jacobian with respect to `(α, t)`.
    pub fn residual_jacobian(&self, q_t_map: &YawPose<T>) -> Option<(Vector2<T>, Matrix2x4<T>)> {
        let p_c = self.point_in_camera(q_t_map);
        let px = self.intrinsics.project(&p_c)?;
        let (s, c) = q_t_map.yaw.sin_cos();
        let f = &self.point;
        let mut d = Matrix3x4::<T>::zeros();
        d[(0, 0)] = -s * f.x - c * f.y;
        d[(1, 0)] = c * f.x - s * f.y;
        d.fixed_view_mut::<3, 3>(0, 1).copy_from(&Matrix3::identity());
        let j = self.intrinsics.projection_jacobian(&p_c) * self.cam_r_q * d;
        Some((px - self.pixel, j))
    }

    /// Two unit vectors spanning the plane orthogonal to the bearing.
    pub fn ray_normals(&self) -> [Vector3<T>; 2] {
        let b = &self.bearing;
        let axis = if b.x.abs() <= b.y.abs() && b.x.abs() <= b.z.abs() {
            Vector3::x()
        } else if b.y.abs() <= b.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let e1 = b.cross(&axis).normalize();
        let e2 = b.cross(&e1);
        [e1, e2]
    }

    /// Signed distance of the transformed point along the bearing.
    pub fn depth(&self, q_t_map: &YawPose<T>) -> T {
        self.bearing.dot(&(q_t_map.transform_point(&self.point) - self.center))
    }
}

/// The four ray constraints of a correspondence pair, linear in `cos α`, `sin α` and `t`:
/// `cos_coef·cos α + sin_coef·sin α + offset + normals·t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSystem<T: Real> {
    pub normals: [Vector3<T>; 4],
    pub cos_coef: Vector4<T>,
    pub sin_coef: Vector4<T>,
    pub offset: Vector4<T>,
    /// Left null vector of the stacked normals, unit length.
    pub null: Vector4<T>,
}

/// Yaw-only constraint `d1·sin α + d2·cos α + d3 = 0` obtained by eliminating `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawConstraint<T: Real> {
    pub d1: T,
    pub d2: T,
    pub d3: T,
}

impl<T: Real> YawConstraint<T> {
    pub fn eval(&self, alpha: T) -> T {
        let (s, c) = alpha.sin_cos();
        self.d1 * s + self.d2 * c + self.d3
    }

    pub fn amplitude(&self) -> T {
        self.d1.hypot(self.d2)
    }

    /// Roots in `[−π, π]`, sorted. Empty if none exist.
    pub fn roots(&self) -> Vec<T> {
        let rho = self.amplitude();
        if rho <= T::zero() {
            return Vec::new();
        }
        let s = -self.d3 / rho;
        let tol = T::lit(1e-12);
        if s.abs() > T::one() + tol {
            return Vec::new();
        }
        let s = s.max(-T::one()).min(T::one());
        let phi = self.d2.atan2(self.d1);
        let theta = s.asin();
        let a = normalize_angle(theta - phi);
        let b = normalize_angle(T::pi() - theta - phi);
        let mut out = vec![a];
        if normalize_angle(a - b).abs() > T::lit(1e-12) {
            out.push(b);
        }
        out.sort_by(|x, y| x.partial_cmp(y).expect("finite roots"));
        out
    }
}

impl<T: Real> PairSystem<T> {
    pub fn new(o1: &Observation<T>, o2: &Observation<T>) -> Self {
        let [e0, e1] = o1.ray_normals();
        let [e2, e3] = o2.ray_normals();
        let normals = [e0, e1, e2, e3];
        let obs = [o1, o1, o2, o2];
        let mut cos_coef = Vector4::zeros();
        let mut sin_coef = Vector4::zeros();
        let mut offset = Vector4::zeros();
        for k in 0..4 {
            let e = &normals[k];
            let f = &obs[k].point;
            cos_coef[k] = e.x * f.x + e.y * f.y;
            sin_coef[k] = e.y * f.x - e.x * f.y;
            offset[k] = e.z * f.z - e.dot(&obs[k].center);
        }
        let det3 = |a: &Vector3<T>, b: &Vector3<T>, c: &Vector3<T>| a.dot(&b.cross(c));
        let n = Vector4::new(
            det3(&normals[1], &normals[2], &normals[3]),
            -det3(&normals[0], &normals[2], &normals[3]),
            det3(&normals[0], &normals[1], &normals[3]),
            -det3(&normals[0], &normals[1], &normals[2]),
        );
        let norm = n.norm();
        let null = if norm > T::zero() { n / norm } else { n };
        Self { normals, cos_coef, sin_coef, offset, null }
    }

    /// Whether the stacked normals have full column rank.
    pub fn is_translation_observable(&self) -> bool {
        self.null.norm() > T::lit(0.5)
    }

    pub fn yaw_constraint(&self) -> YawConstraint<T> {
        YawConstraint {
            d1: self.null.dot(&self.sin_coef),
            d2: self.null.dot(&self.cos_coef),
            d3: self.null.dot(&self.offset),
        }
    }

    /// Least-squares translation for a fixed yaw.
    pub fn translation(&self, alpha: T) -> Option<Vector3<T>> {
        let (s, c) = alpha.sin_cos();
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for k in 0..4 {
            let e = &self.normals[k];
            let rhs = -(self.cos_coef[k] * c + self.sin_coef[k] * s + self.offset[k]);
            ata += e * e.transpose();
            atb += e * rhs;
        }
        ata.cholesky().map(|ch| ch.solve(&atb))
    }
}

/// One hypothesis of the minimal solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverCandidate<T: Real> {
    pub pose: YawPose<T>,
    /// Observation indices the hypothesis was computed from.
    pub samples: [usize; 2],
}

/// Two-point 4DoF solver. Returns every real root with both points in front of their
/// cameras, in ascending yaw order.
pub fn solve_2pt<T: Real>(o1: &Observation<T>, o2: &Observation<T>) -> Result<Vec<SolverCandidate<T>>, SolverError> {
    let scale = T::one() + o1.point.norm().max(o2.point.norm()) + o1.center.norm().max(o2.center.norm());
    if (o1.point - o2.point).norm() <= T::lit(1e-9) * scale {
        return Err(SolverError::Degenerate("coincident map points"));
    }
    let sys = PairSystem::new(o1, o2);
    if !sys.is_translation_observable() {
        return Err(SolverError::Degenerate("parallel rays"));
    }
    let d = sys.yaw_constraint();
    let eps = T::lit(1e-12) * scale;
    if d.amplitude() <= eps {
        return Err(if d.d3.abs() <= eps {
            SolverError::Degenerate("yaw unobservable")
        } else {
            SolverError::NoSolution
        });
    }
    let mut out = Vec::with_capacity(2);
    for alpha in d.roots() {
        let Some(t) = sys.translation(alpha) else { continue };
        let pose = YawPose::new(alpha, t);
        if o1.depth(&pose) > T::zero() && o2.depth(&pose) > T::zero() {
            out.push(SolverCandidate { pose, samples: [o1.index, o2.index] });
        }
    }
    if out.is_empty() {
        Err(SolverError::NoSolution)
    } else {
        Ok(out)
    }
}

/// Gauss-Newton (with Levenberg damping) on pixel residuals of `obs`, over `(α, t)`.
pub fn refine_yaw_pose<T: Real>(obs: &[Observation<T>], initial: &YawPose<T>, max_iterations: usize) -> YawPose<T> {
    let cost = |pose: &YawPose<T>| -> Option<T> {
        let mut sum = T::zero();
        for o in obs {
            let (r, _) = o.residual_jacobian(pose)?;
            sum += r.norm_squared();
        }
        Some(sum)
    };
    let mut pose = *initial;
    let Some(mut current) = cost(&pose) else { return pose };
    let mut lambda = T::lit(1e-6);
    for _ in 0..max_iterations {
        let mut h = Matrix4::<T>::zeros();
        let mut g = Vector4::<T>::zeros();
        for o in obs {
            if let Some((r, j)) = o.residual_jacobian(&pose) {
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = h;
            for i in 0..4 {
                damped[(i, i)] += lambda * (T::one() + h[(i, i)]);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                lambda *= T::lit(10.0);
                continue;
            };
            let candidate =
                YawPose::new(pose.yaw + step[0], pose.translation + Vector3::new(step[1], step[2], step[3]));
            match cost(&candidate) {
                Some(c) if c <= current => {
                    let converged = step.norm() < T::lit(1e-12) || current - c <= current * T::lit(1e-15);
                    pose = candidate;
                    current = c;
                    lambda = (lambda * T::lit(0.1)).max(T::lit(1e-12));
                    improved = !converged;
                    break;
                }
                _ => lambda *= T::lit(10.0),
            }
        }
        if !improved {
            break;
        }
    }
    pose
}

/// RANSAC settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig<T: Real> {
    pub iterations: usize,
    pub threshold_px: T,
    pub min_inliers: usize,
    /// Sample proportionally to correspondence weights instead of uniformly.
    pub use_weights: bool,
    pub seed: u64,
    /// Points per hypothesis. Two is the minimal solver; larger samples solve from the
    /// first two points, refine on all of them and require all to agree.
    pub sample_size: usize,
    /// Least-squares polish of the winning pose on its inliers.
    pub polish: bool,
}

impl<T: Real> Default for RansacConfig<T> {
    fn default() -> Self {
        Self {
            iterations: 100,
            threshold_px: T::lit(3.0),
            min_inliers: 6,
            use_weights: true,
            seed: 0,
            sample_size: 2,
            polish: false,
        }
    }
}

impl<T: Real> RansacConfig<T> {
    fn validate(&self) -> Result<(), SolverError> {
        if self.iterations == 0 {
            return Err(SolverError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.threshold_px > T::zero()) {
            return Err(SolverError::InvalidConfig("threshold must be positive".into()));
        }
        if self.sample_size < 2 {
            return Err(SolverError::InvalidConfig("sample size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<T: Real> {
    /// `q_t_map` of the best hypothesis.
    pub pose: YawPose<T>,
    /// Indices of correspondences reprojecting within the threshold, ascending.
    pub inliers: Vec<usize>,
    pub inlier_ratio: T,
    pub iterations: usize,
}

impl<T: Real> MatchResult<T> {
    /// Query frame pose in the map frame.
    pub fn map_t_query(&self) -> YawPose<T> {
        let inv = self.pose.to_transform().inverse();
        YawPose::new(-self.pose.yaw, inv.translation)
    }
}

fn inliers_of<T: Real>(obs: &[Observation<T>], pose: &YawPose<T>, threshold: T) -> Vec<usize> {
    obs.iter().filter(|o| o.reprojection_error(pose).is_some_and(|e| e <= threshold)).map(|o| o.index).collect()
}

fn count_inliers<T: Real>(obs: &[Observation<T>], pose: &YawPose<T>, threshold: T) -> usize {
    obs.iter().filter(|o| o.reprojection_error(pose).is_some_and(|e| e <= threshold)).count()
}

/// Robust 4DoF pose from correspondences already expressed in a query frame.
///
/// Deterministic for a given seed; among equally supported hypotheses the one drawn first
/// wins.
pub fn ransac_pose<T: Real>(obs: &[Observation<T>], cfg: &RansacConfig<T>) -> Result<MatchResult<T>, SolverError> {
    cfg.validate()?;
    let n = cfg.sample_size;
    if obs.len() < n {
        return Err(SolverError::InsufficientCorrespondences { needed: n, got: obs.len() });
    }
    let weights: Vec<f64> = obs.iter().map(|o| o.weight.as_f64().max(0.0)).collect();
    let weighted = cfg.use_weights && weights.iter().filter(|w| **w > 0.0).count() >= n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, YawPose<T>)> = None;
    let mut sample = Vec::with_capacity(n);
    for _ in 0..cfg.iterations {
        sample.clear();
        if weighted {
            let drawn = index::sample_weighted(&mut rng, obs.len(), |i| weights[i], n)
                .expect("weights are finite and enough are positive");
            sample.extend(drawn.iter());
        } else {
            sample.extend(index::sample(&mut rng, obs.len(), n).iter());
        }
        let Ok(candidates) = solve_2pt(&obs[sample[0]], &obs[sample[1]]) else {
            continue;
        };
        for cand in candidates {
            let pose = if n > 2 {
                let subset: Vec<_> = sample.iter().map(|&i| obs[i]).collect();
                let refined = refine_yaw_pose(&subset, &cand.pose, 10);
                let agree =
                    subset.iter().all(|o| o.reprojection_error(&refined).is_some_and(|e| e <= cfg.threshold_px));
                if !agree {
                    continue;
                }
                refined
            } else {
                cand.pose
            };
            let count = count_inliers(obs, &pose, cfg.threshold_px);
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, pose));
            }
        }
    }
    let (count, mut pose) = best.unwrap_or((0, YawPose::new(T::zero(), Vector3::zeros())));
    if count < cfg.min_inliers.max(n) {
        return Err(SolverError::NoConsensus { best: count, required: cfg.min_inliers.max(n) });
    }
    let mut inliers = inliers_of(obs, &pose, cfg.threshold_px);
    if cfg.polish {
        let support: Vec<_> = obs.iter().filter(|o| inliers.contains(&o.index)).copied().collect();
        let polished = refine_yaw_pose(&support, &pose, 20);
        let polished_inliers = inliers_of(obs, &polished, cfg.threshold_px);
        if polished_inliers.len() >= inliers.len() {
            pose = polished;
            inliers = polished_inliers;
        }
    }
    inliers.sort_unstable();
    Ok(MatchResult {
        pose,
        inlier_ratio: T::lit(inliers.len() as f64 / obs.len() as f64),
        inliers,
        iterations: cfg.iterations,
    })
}

/// Builds observations in `frame` and runs [`ransac_pose`]. A rig with several cameras
/// gives the multi-camera variant.
pub fn match_correspondences<T: Real>(
    corrs: &[Correspondence<T>],
    frame: &QueryFrame<T>,
    cfg: &RansacConfig<T>,
) -> Result<MatchResult<T>, SolverError> {
    let obs = frame.observations(corrs)?;
    ransac_pose(&obs, cfg)
}

/// Probability that at least one of `k` samples of size `n` is outlier free when each
/// point is an inlier with probability `w`: `1 − (1 − wⁿ)ᵏ`.
pub fn ransac_success_probability<T: Real>(w: T, n: u32, k: u32) -> T {
    T::one() - (T::one() - w.powi(n as i32)).powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn pinhole() -> Intrinsics<f64> {
        Intrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480)
    }

    /// Camera looking along `x` of a gravity-aligned body, single-camera rig.
    fn mono() -> Vec<CameraModel<f64>> {
        vec![CameraModel::new(
            0,
            pinhole(),
            RigidTransform::new(crate::camera::body_camera_rotation(0.0), Vector3::zeros()),
        )]
    }

    fn observe(
        frame: &QueryFrame<f64>,
        truth: &YawPose<f64>,
        camera: usize,
        point: Vector3<f64>,
    ) -> Correspondence<f64> {
        let map_t_imu = frame.map_t_imu(truth);
        let cam = &frame.cameras()[camera];
        let cam_t_map = (map_t_imu * cam.imu_t_cam).inverse();
        let pixel = cam.intrinsics.project_unchecked(&cam_t_map.transform_point(&point));
        Correspondence { camera, map: 0, landmark: 0, pixel, point, weight: 1.0, inlier: true }
    }

    #[test]
    fn identity_pose_recovered() {
        // Body x forward: the camera optical axis is body x, so landmarks lie along +x.
        let frame = QueryFrame::new(&Rotation::identity(), &mono(), 0).unwrap();
        let truth = YawPose::new(0.0, Vector3::zeros());
        let f1 = Vector3::new(5.0, -1.0, 0.0);
        let f2 = Vector3::new(4.0, 0.0, -1.0);
        let c1 = observe(&frame, &truth, 0, f1);
        let c2 = observe(&frame, &truth, 0, f2);
        let obs = frame.observations(&[c1, c2]).unwrap();
        let cands = solve_2pt(&obs[0], &obs[1]).unwrap();
        assert!(cands.iter().any(|c| c.pose.yaw.abs() < 1e-12 && c.pose.translation.norm() < 1e-12));
    }

    #[test]
    fn recovers_yaw_thirty_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attitude = Rotation::from_euler_zyx(0.4, 0.05, -0.03);
        let frame = QueryFrame::new(&attitude, &mono(), 0).unwrap();
        let truth = YawPose::new(30f64.to_radians(), Vector3::new(1.0, 2.0, 0.5));
        let cam_t_map = (frame.map_t_imu(&truth) * frame.cameras()[0].imu_t_cam).inverse();
        let map_t_cam = cam_t_map.inverse();
        for _ in 0..50 {
            let mut pts = Vec::new();
            while pts.len() < 2 {
                let p_c =
                    Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..10.0));
                pts.push(map_t_cam.transform_point(&p_c));
            }
            let corrs = [observe(&frame, &truth, 0, pts[0]), observe(&frame, &truth, 0, pts[1])];
            let obs = frame.observations(&corrs).unwrap();
            let cands = solve_2pt(&obs[0], &obs[1]).unwrap();
            for c in &cands {
                // Every returned root satisfies both ray constraints.
                for o in &obs {
                    let v = c.pose.transform_point(&o.point) - o.center;
                    assert!(v.cross(&o.bearing).norm() < 1e-9);
                }
            }
            let best = cands
                .iter()
                .map(|c| (c.pose.yaw - truth.yaw).abs() + (c.pose.translation - truth.translation).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-8, "error {best}");
        }
    }

    #[test]
    fn identical_landmarks_are_degenerate() {
        let frame = QueryFrame::new(&Rotation::identity(), &mono(), 0).unwrap();
        let truth = YawPose::new(0.0, Vector3::zeros());
        let c = observe(&frame, &truth, 0, Vector3::new(5.0, 0.3, 0.2));
        let obs = frame.observations(&[c, c]).unwrap();
        assert!(matches!(solve_2pt(&obs[0], &obs[1]), Err(SolverError::Degenerate(_))));
    }

    #[test]
    fn yaw_constraint_roots_match_closed_form() {
        let d = YawConstraint::<f64> { d1: 0.3, d2: -0.7, d3: 0.2 };
        let roots = d.roots();
        assert_eq!(roots.len(), 2);
        for r in roots {
            assert!(d.eval(r).abs() < 1e-14);
        }
        assert!(YawConstraint::<f64> { d1: 0.1, d2: 0.0, d3: 0.5 }.roots().is_empty());
    }

    #[test]
    fn multi_camera_rays_share_one_frame() {
        let rig: Vec<_> = (0..4)
            .map(|k| {
                let yaw = k as f64 * std::f64::consts::FRAC_PI_2;
                let offset = Rotation::from_yaw(yaw).rotate(&Vector3::new(0.1, 0.0, 0.05));
                CameraModel::new(k, pinhole(), RigidTransform::new(crate::camera::body_camera_rotation(yaw), offset))
            })
            .collect();
        let frame = QueryFrame::new(&Rotation::from_euler_zyx(1.0, 0.02, 0.04), &rig, 0).unwrap();
        let truth = YawPose::new(-2.0, Vector3::new(-3.0, 1.0, 0.2));
        let map_t_imu = frame.map_t_imu(&truth);
        // One landmark in front of camera 1 (left) and one in front of camera 3 (right).
        let p1 = map_t_imu.transform_point(&Vector3::new(0.3, 6.0, 0.5));
        let p3 = map_t_imu.transform_point(&Vector3::new(-0.5, -4.0, -0.2));
        let corrs = [observe(&frame, &truth, 1, p1), observe(&frame, &truth, 3, p3)];
        let obs = frame.observations(&corrs).unwrap();
        let cands = solve_2pt(&obs[0], &obs[1]).unwrap();
        assert!(cands
            .iter()
            .any(|c| (c.pose.yaw - truth.yaw).abs() < 1e-9 && (c.pose.translation - truth.translation).norm() < 1e-9));
    }

    #[test]
    fn frame_round_trips_map_pose() {
        let frame = QueryFrame::new(&Rotation::from_euler_zyx(0.3, 0.1, -0.2), &mono(), 0).unwrap();
        let truth = YawPose::new(1.2, Vector3::new(0.5, -0.5, 2.0));
        let back = frame.yaw_pose_from(&frame.map_t_imu(&truth));
        assert_relative_eq!(back.yaw, truth.yaw, epsilon = 1e-12);
        assert_relative_eq!(back.translation, truth.translation, epsilon = 1e-12);
    }

    #[test]
    fn residual_jacobian_matches_finite_difference() {
        let frame = QueryFrame::new(&Rotation::from_euler_zyx(0.0, 0.1, 0.0), &mono(), 0).unwrap();
        let truth = YawPose::new(0.3, Vector3::new(0.2, 0.1, -0.3));
        let c = observe(&frame, &truth, 0, frame.map_t_imu(&truth).transform_point(&Vector3::new(5.0, 0.5, 0.3)));
        let o = frame.observation(0, &c).unwrap();
        let pose = YawPose::new(0.32, Vector3::new(0.25, 0.05, -0.2));
        let (_, j) = o.residual_jacobian(&pose).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let shift = |s: f64| {
                let mut t = pose.translation;
                let mut yaw = pose.yaw;
                if k == 0 {
                    yaw += s;
                } else {
                    t[k - 1] += s;
                }
                o.residual_jacobian(&YawPose::new(yaw, t)).unwrap().0
            };
            let num = (shift(h) - shift(-h)) / (2.0 * h);
            assert_relative_eq!(num, j.column(k).into_owned(), epsilon = 1e-4);
        }
    }

    #[test]
    fn ransac_exact_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = QueryFrame::new(&Rotation::identity(), &mono(), 0).unwrap();
        let truth = YawPose::new(0.8, Vector3::new(1.0, -2.0, 0.3));
        let map_t_imu = frame.map_t_imu(&truth);
        let corrs: Vec<_> = (0..50)
            .map(|_| {
                let p_body =
                    Vector3::new(rng.random_range(3.0..10.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
                observe(&frame, &truth, 0, map_t_imu.transform_point(&p_body))
            })
            .collect();
        let res = match_correspondences(&corrs, &frame, &RansacConfig::default()).unwrap();
        assert_eq!(res.inlier_ratio, 1.0);
        assert!((res.pose.yaw - truth.yaw).abs() < 1e-6);
        assert!((res.pose.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn ransac_rejects_bad_input() {
        let frame = QueryFrame::new(&Rotation::identity(), &mono(), 0).unwrap();
        let obs = frame
            .observations(&[observe(&frame, &YawPose::new(0.0, Vector3::zeros()), 0, Vector3::new(5.0, 0.0, 0.0))])
            .unwrap();
        assert!(matches!(
            ransac_pose(&obs, &RansacConfig::default()),
            Err(SolverError::InsufficientCorrespondences { needed: 2, got: 1 })
        ));
        let cfg = RansacConfig { iterations: 0, ..RansacConfig::default() };
        assert!(matches!(ransac_pose(&obs, &cfg), Err(SolverError::InvalidConfig(_))));
    }

    #[test]
    fn success_probability_formula() {
        assert_eq!(ransac_success_probability(1.0, 3, 7), 1.0);
        assert_relative_eq!(ransac_success_probability(0.5, 2, 1), 0.25, epsilon = 1e-15);
        assert!(ransac_success_probability(0.2, 2, 100) > ransac_success_probability(0.2, 3, 100));
    }
}
