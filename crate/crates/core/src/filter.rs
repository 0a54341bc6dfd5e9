//! Multi-map Schmidt-MSCKF.
//!
//! # State layout
//!
//! The error state is ordered `[IMU | clones | map transforms | keyframes]`:
//!
//! | block | size | contents |
//! |-------|------|----------|
//! | IMU | 15 | `δθ` (right perturbation of `local_R_imu`), `δv`, `δp`, `δb_g`, `δb_a` |
//! | clone `k` | 6 | `δθ`, `δp` of a past IMU pose |
//! | map `j` | 6 | `δθ`, `δp` of `map_T_local` (right perturbation of the rotation) |
//! | keyframe `i` | 6 | `δθ`, `δp` of a map keyframe camera pose `map_T_cam` |
//!
//! The first three groups are *active*. Keyframes are *nuisance* states: their
//! uncertainty enters the gain through the cross-covariance, but their estimates and their
//! own covariance block never change.
//!
//! Features are never part of the state: every feature's residual is projected onto the
//! left null space of its feature Jacobian before the update.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3, QR};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::geometry::{skew, RigidTransform, Rotation};
use crate::imu::{integrate_interval, ImuSample, NavState};
use crate::initializer::InitResult;
use crate::map_model::MapBundle;
use crate::solvers::{Observation, QueryFrame};

pub const IMU_DIM: usize = 15;
pub const POSE_DIM: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("timestamps must increase: {got} after {previous}")]
    NonMonotoneTime { previous: f64, got: f64 },
    #[error("map {0} is not registered")]
    UnknownMap(u32),
    #[error("map {0} is already registered")]
    DuplicateMap(u32),
    #[error("camera {0} is not part of the rig")]
    UnknownCamera(usize),
    #[error("no clone in the sliding window")]
    EmptyWindow,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Sliding window size `B`.
    pub window: usize,
    /// Per-sample gyroscope white noise, rad/s.
    pub gyro_noise: f64,
    /// Per-sample accelerometer white noise, m/s².
    pub accel_noise: f64,
    /// Gyroscope bias random walk, rad/s/√s.
    pub gyro_walk: f64,
    /// Accelerometer bias random walk, m/s²/√s.
    pub accel_walk: f64,
    pub pixel_sigma: f64,
    /// Multiplier on `pixel_sigma` for map observations.
    pub map_noise_inflation: f64,
    /// Chi-square gate confidence per feature block.
    pub gate_confidence: f64,
    /// Tracks shorter than this are not used.
    pub min_track_length: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Map keyframe pose standard deviations. With both zero, keyframes are constants and
    /// never enter the state.
    pub keyframe_position_std: f64,
    pub keyframe_rotation_std: f64,
    /// Map keyframes anchoring each map feature.
    pub keyframes_per_feature: usize,
    /// Nuisance keyframes beyond this count are dropped, least recently used first.
    pub max_keyframes: usize,
    /// Floors on the initial map transform uncertainty.
    pub registration_position_std: f64,
    pub registration_yaw_std: f64,
    pub registration_tilt_std: f64,
    /// Multiplier applied to the initializer's pose covariance.
    pub registration_inflation: f64,
    /// Initial IMU uncertainties.
    pub initial_tilt_std: f64,
    pub initial_velocity_std: f64,
    pub initial_gyro_bias_std: f64,
    pub initial_accel_bias_std: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window: 11,
            gyro_noise: 1.7e-3,
            accel_noise: 2.0e-2,
            gyro_walk: 2.0e-5,
            accel_walk: 3.0e-4,
            pixel_sigma: 1.0,
            map_noise_inflation: 1.0,
            gate_confidence: 0.95,
            min_track_length: 3,
            min_depth: 0.2,
            max_depth: 100.0,
            keyframe_position_std: 0.01,
            keyframe_rotation_std: 0.1f64.to_radians(),
            keyframes_per_feature: 2,
            max_keyframes: 20,
            registration_position_std: 0.02,
            registration_yaw_std: 0.1f64.to_radians(),
            registration_tilt_std: 0.1f64.to_radians(),
            registration_inflation: 1.0,
            initial_tilt_std: 0.5f64.to_radians(),
            initial_velocity_std: 0.05,
            initial_gyro_bias_std: 1e-3,
            initial_accel_bias_std: 1e-2,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let nonneg = [
            self.gyro_noise,
            self.accel_noise,
            self.gyro_walk,
            self.accel_walk,
            self.keyframe_position_std,
            self.keyframe_rotation_std,
            self.registration_position_std,
            self.registration_yaw_std,
            self.registration_tilt_std,
            self.initial_tilt_std,
            self.initial_velocity_std,
            self.initial_gyro_bias_std,
            self.initial_accel_bias_std,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(FilterError::InvalidConfig("noise parameters must be finite and non-negative".into()));
        }
        if self.window < 2 {
            return Err(FilterError::InvalidConfig("window must hold at least two clones".into()));
        }
        if !(self.pixel_sigma > 0.0) || !(self.map_noise_inflation > 0.0) || !(self.registration_inflation > 0.0) {
            return Err(FilterError::InvalidConfig("pixel sigma and inflations must be positive".into()));
        }
        if !(self.gate_confidence > 0.0 && self.gate_confidence < 1.0) {
            return Err(FilterError::InvalidConfig("gate confidence must lie in (0, 1)".into()));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(FilterError::InvalidConfig("depth range must satisfy 0 < min < max".into()));
        }
        if self.min_track_length < 2 || self.keyframes_per_feature == 0 {
            return Err(FilterError::InvalidConfig("tracks need two frames and map features one keyframe".into()));
        }
        Ok(())
    }

    fn keyframes_are_states(&self) -> bool {
        self.keyframe_position_std > 0.0 || self.keyframe_rotation_std > 0.0
    }
}

/// IMU navigation state with biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub nav: NavState<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl ImuState {
    pub fn new(nav: NavState<f64>) -> Self {
        Self { nav, gyro_bias: Vector3::zeros(), accel_bias: Vector3::zeros() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClonePose {
    pub id: u64,
    pub t: f64,
    /// `local_T_imu` at `t`.
    pub pose: RigidTransform<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapTransform {
    pub map: u32,
    /// `map_T_local`.
    pub transform: RigidTransform<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeState {
    pub map: u32,
    pub keyframe: u32,
    /// `map_T_cam`.
    pub pose: RigidTransform<f64>,
}

/// Mean and covariance of the augmented state.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub t: f64,
    pub imu: ImuState,
    pub clones: VecDeque<ClonePose>,
    pub maps: Vec<MapTransform>,
    pub keyframes: Vec<KeyframeState>,
    pub covariance: DMatrix<f64>,
}

impl FilterState {
    pub fn active_dim(&self) -> usize {
        IMU_DIM + POSE_DIM * (self.clones.len() + self.maps.len())
    }

    pub fn dim(&self) -> usize {
        self.active_dim() + POSE_DIM * self.keyframes.len()
    }

    pub fn clone_offset(&self, k: usize) -> usize {
        IMU_DIM + POSE_DIM * k
    }

    pub fn map_offset(&self, j: usize) -> usize {
        IMU_DIM + POSE_DIM * (self.clones.len() + j)
    }

    pub fn keyframe_offset(&self, i: usize) -> usize {
        self.active_dim() + POSE_DIM * i
    }

    pub fn map_index(&self, id: u32) -> Option<usize> {
        self.maps.iter().position(|m| m.map == id)
    }

    pub fn clone_index(&self, id: u64) -> Option<usize> {
        self.clones.iter().position(|c| c.id == id)
    }

    pub fn keyframe_index(&self, map: u32, keyframe: u32) -> Option<usize> {
        self.keyframes.iter().position(|k| k.map == map && k.keyframe == keyframe)
    }

    /// Active-active, active-nuisance and nuisance-nuisance covariance blocks.
    pub fn partition(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let a = self.active_dim();
        let n = self.dim() - a;
        let p = &self.covariance;
        (p.view((0, 0), (a, a)).into_owned(), p.view((0, a), (a, n)).into_owned(), p.view((a, a), (n, n)).into_owned())
    }

    /// Applies an active-state correction.
    fn apply_correction(&mut self, dx: &DVector<f64>) {
        let v3 = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
        let nav = &mut self.imu.nav;
        nav.rotation = nav.rotation * Rotation::exp(&v3(0));
        nav.velocity += v3(3);
        nav.position += v3(6);
        self.imu.gyro_bias += v3(9);
        self.imu.accel_bias += v3(12);
        for (k, c) in self.clones.iter_mut().enumerate() {
            let o = IMU_DIM + POSE_DIM * k;
            c.pose.rotation = c.pose.rotation * Rotation::exp(&v3(o));
            c.pose.translation += v3(o + 3);
        }
        let base = IMU_DIM + POSE_DIM * self.clones.len();
        for (j, m) in self.maps.iter_mut().enumerate() {
            let o = base + POSE_DIM * j;
            m.transform.rotation = m.transform.rotation * Rotation::exp(&v3(o));
            m.transform.translation += v3(o + 3);
        }
    }

    fn symmetrize(&mut self) {
        let p = &mut self.covariance;
        let t = p.transpose();
        *p += t;
        *p *= 0.5;
    }
}

/// Inserts `size` rows and columns at `at`, filled with `cross` (size × dim, relative to
/// the old ordering) and the `diag` block.
fn insert_block(p: &DMatrix<f64>, at: usize, cross: &DMatrix<f64>, diag: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    let s = diag.nrows();
    let mut out = DMatrix::zeros(n + s, n + s);
    let map = |i: usize| if i < at { i } else { i + s };
    for i in 0..n {
        for j in 0..n {
            out[(map(i), map(j))] = p[(i, j)];
        }
    }
    for r in 0..s {
        for j in 0..n {
            out[(at + r, map(j))] = cross[(r, j)];
            out[(map(j), at + r)] = cross[(r, j)];
        }
        for c in 0..s {
            out[(at + r, at + c)] = diag[(r, c)];
        }
    }
    out
}

fn remove_block(p: DMatrix<f64>, at: usize, size: usize) -> DMatrix<f64> {
    p.remove_rows(at, size).remove_columns(at, size)
}

/// One tracked feature: pixels in several clones.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub feature: u32,
    /// `(clone id, camera, pixel)`.
    pub observations: Vec<(u64, usize, Vector2<f64>)>,
}

/// A map feature seen in the current image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapFeature {
    pub landmark: u32,
    pub camera: usize,
    pub pixel: Vector2<f64>,
    /// The same point in another map, `(map, landmark)`.
    pub cross: Option<(u32, u32)>,
}

/// Map observations from one image, expressed against map `map`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapObservation {
    pub map: u32,
    /// Clone holding the pose at the image time.
    pub clone: u64,
    pub features: Vec<MapFeature>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub accepted: usize,
    pub gated: usize,
    pub skipped: usize,
}

impl std::ops::AddAssign for UpdateStats {
    fn add_assign(&mut self, o: Self) {
        self.accepted += o.accepted;
        self.gated += o.gated;
        self.skipped += o.skipped;
    }
}

/// Initial alignment of a map with the local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    /// `map_T_imu` at the current filter time.
    pub map_t_imu: RigidTransform<f64>,
    /// Covariance of `(yaw, translation)` of `q_T_map` from the initializer.
    pub yaw_pose_covariance: nalgebra::Matrix4<f64>,
    /// `q_T_imu` of the query frame used by the initializer.
    pub q_t_imu: RigidTransform<f64>,
    pub yaw: f64,
}

impl Registration {
    /// Builds a registration from an initializer result, with the pose covariance taken
    /// from the Gauss-Newton information of its inliers.
    pub fn from_init(frame: &QueryFrame<f64>, obs: &[Observation<f64>], init: &InitResult<f64>, sigma_px: f64) -> Self {
        let mut info = nalgebra::Matrix4::zeros();
        for o in obs.iter().filter(|o| init.inliers.binary_search(&o.index).is_ok()) {
            if let Some((_, j)) = o.residual_jacobian(&init.refined_pose) {
                info += j.transpose() * j;
            }
        }
        let cov = info.try_inverse().map(|c| c * (sigma_px * sigma_px)).unwrap_or_else(nalgebra::Matrix4::identity);
        Self {
            map_t_imu: frame.map_t_imu(&init.refined_pose),
            yaw_pose_covariance: cov,
            q_t_imu: *frame.q_t_imu(),
            yaw: init.refined_pose.yaw,
        }
    }
}

/// One line of the pose log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: f64,
    /// `None` for the local-frame record.
    pub map: Option<u32>,
    /// `map_T_imu` (or `local_T_imu` for the local record).
    pub pose: RigidTransform<f64>,
    pub local_pose: RigidTransform<f64>,
    pub covariance_trace: f64,
}

impl PoseRecord {
    pub const CSV_HEADER: &'static str = "t,map,x,y,z,qx,qy,qz,qw,lx,ly,lz,lqx,lqy,lqz,lqw,cov_trace";

    /// CSV line with JPL quaternions; floats use the shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let map = self.map.map_or_else(|| "local".to_string(), |m| m.to_string());
        let _ = write!(s, "{},{}", self.t, map);
        for pose in [&self.pose, &self.local_pose] {
            let t = &pose.translation;
            let q = pose.rotation.to_jpl();
            let _ = write!(s, ",{},{},{},{},{},{},{}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
        }
        let _ = write!(s, ",{}", self.covariance_trace);
        s
    }
}

/// Multi-map Schmidt-MSCKF estimator.
#[derive(Clone, Debug)]
pub struct Filter {
    config: FilterConfig,
    rig: Vec<CameraModel<f64>>,
    state: FilterState,
    last_sample: Option<ImuSample<f64>>,
    next_clone: u64,
    maps: BTreeMap<u32, MapBundle<f64>>,
    tracks: BTreeMap<u32, FeatureTrack>,
    keyframe_use: HashMap<(u32, u32), u64>,
    use_counter: u64,
    chi2: ChiSquaredTable,
    diagnostics: Diagnostics,
}

/// Running numerical health indicators of the filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Feature blocks projected onto a left null space so far.
    pub projections: usize,
    /// Largest `max |Nᵀ H_f|` over all projections.
    pub max_null_space_residual: f64,
}

#[derive(Clone, Debug, Default)]
struct ChiSquaredTable {
    confidence: f64,
    cache: Vec<f64>,
}

impl ChiSquaredTable {
    fn new(confidence: f64) -> Self {
        Self { confidence, cache: Vec::new() }
    }

    fn threshold(&mut self, dof: usize) -> f64 {
        while self.cache.len() <= dof {
            let k = self.cache.len();
            let v = if k == 0 {
                0.0
            } else {
                ChiSquared::new(k as f64).expect("positive dof").inverse_cdf(self.confidence)
            };
            self.cache.push(v);
        }
        self.cache[dof]
    }
}

/// Rows of one feature's stacked measurement: residuals, state Jacobian and feature
/// Jacobian, plus the per-row noise standard deviation.
struct FeatureRows {
    residual: Vec<f64>,
    h_x: Vec<Vec<(usize, [f64; 3])>>,
    h_f: Vec<[f64; 3]>,
    sigma: Vec<f64>,
}

impl FeatureRows {
    fn new() -> Self {
        Self { residual: Vec::new(), h_x: Vec::new(), h_f: Vec::new(), sigma: Vec::new() }
    }

    fn len(&self) -> usize {
        self.residual.len()
    }

    /// Adds the two rows of a pixel measurement with Jacobians `blocks` (state offset and
    /// 2×3 block) and `h_f`.
    fn push(&mut self, residual: Vector2<f64>, blocks: &[(usize, Matrix2x3<f64>)], h_f: &Matrix2x3<f64>, sigma: f64) {
        for r in 0..2 {
            self.residual.push(residual[r]);
            self.h_x.push(blocks.iter().map(|(o, b)| (*o, [b[(r, 0)], b[(r, 1)], b[(r, 2)]])).collect());
            self.h_f.push([h_f[(r, 0)], h_f[(r, 1)], h_f[(r, 2)]]);
            self.sigma.push(sigma);
        }
    }

    fn dense(&self, dim: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let m = self.len();
        let mut hx = DMatrix::zeros(m, dim);
        let mut hf = DMatrix::zeros(m, 3);
        let mut r = DVector::zeros(m);
        for i in 0..m {
            // Whitened so every row has unit noise.
            let w = 1.0 / self.sigma[i];
            r[i] = self.residual[i] * w;
            for (o, v) in &self.h_x[i] {
                for c in 0..3 {
                    hx[(i, o + c)] += v[c] * w;
                }
            }
            for c in 0..3 {
                hf[(i, c)] = self.h_f[i][c] * w;
            }
        }
        (r, hx, hf)
    }
}

/// Orthonormal basis of the left null space of the `m × 3` matrix `h_f` (`m × (m − 3)`).
pub fn left_null_space(h_f: &DMatrix<f64>) -> DMatrix<f64> {
    let m = h_f.nrows();
    let mut square = DMatrix::zeros(m, m);
    square.view_mut((0, 0), (m, h_f.ncols())).copy_from(h_f);
    let q = QR::new(square).q();
    q.columns(h_f.ncols(), m - h_f.ncols()).into_owned()
}

/// Projects a pixel measurement of camera-frame point `p_c`; `None` behind the camera.
fn pixel_and_jacobian(cam: &CameraModel<f64>, p_c: &Vector3<f64>) -> Option<(Vector2<f64>, Matrix2x3<f64>)> {
    let px = cam.intrinsics.project(p_c)?;
    Some((px, cam.intrinsics.projection_jacobian(p_c)))
}

impl Filter {
    /// Starts the filter at `t` from `imu`, with diagonal initial covariance. Yaw and
    /// position of the local frame are gauge freedoms and start with zero uncertainty.
    pub fn new(config: FilterConfig, rig: Vec<CameraModel<f64>>, imu: ImuState, t: f64) -> Result<Self, FilterError> {
        config.validate()?;
        if rig.is_empty() {
            return Err(FilterError::InvalidConfig("rig has no cameras".into()));
        }
        let mut p = DMatrix::zeros(IMU_DIM, IMU_DIM);
        let tilt = config.initial_tilt_std.powi(2);
        for (i, v) in [
            tilt,
            tilt,
            0.0,
            config.initial_velocity_std.powi(2),
            config.initial_velocity_std.powi(2),
            config.initial_velocity_std.powi(2),
            0.0,
            0.0,
            0.0,
            config.initial_gyro_bias_std.powi(2),
            config.initial_gyro_bias_std.powi(2),
            config.initial_gyro_bias_std.powi(2),
            config.initial_accel_bias_std.powi(2),
            config.initial_accel_bias_std.powi(2),
            config.initial_accel_bias_std.powi(2),
        ]
        .into_iter()
        .enumerate()
        {
            p[(i, i)] = v;
        }
        let chi2 = ChiSquaredTable::new(config.gate_confidence);
        Ok(Self {
            config,
            rig,
            state: FilterState {
                t,
                imu,
                clones: VecDeque::new(),
                maps: Vec::new(),
                keyframes: Vec::new(),
                covariance: p,
            },
            last_sample: None,
            next_clone: 0,
            maps: BTreeMap::new(),
            tracks: BTreeMap::new(),
            keyframe_use: HashMap::new(),
            use_counter: 0,
            diagnostics: Diagnostics::default(),
            chi2,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn rig(&self) -> &[CameraModel<f64>] {
        &self.rig
    }

    pub fn is_registered(&self, map: u32) -> bool {
        self.state.map_index(map).is_some()
    }

    pub fn registered_maps(&self) -> impl Iterator<Item = u32> + '_ {
        self.state.maps.iter().map(|m| m.map)
    }

    /// Propagates mean and covariance to the time of `sample`. The first sample only sets
    /// the integration start.
    pub fn propagate(&mut self, sample: &ImuSample<f64>) -> Result<(), FilterError> {
        let Some(prev) = self.last_sample else {
            if sample.t < self.state.t {
                return Err(FilterError::NonMonotoneTime { previous: self.state.t, got: sample.t });
            }
            self.last_sample = Some(*sample);
            self.state.t = sample.t;
            return Ok(());
        };
        if !(sample.t > prev.t) {
            return Err(FilterError::NonMonotoneTime { previous: prev.t, got: sample.t });
        }
        let dt = sample.t - prev.t;
        let imu = self.state.imu;
        let omega = (prev.gyro + sample.gyro) * 0.5 - imu.gyro_bias;
        let accel = (prev.accel + sample.accel) * 0.5 - imu.accel_bias;
        let r = imu.nav.rotation.matrix();

        let mut f = nalgebra::SMatrix::<f64, IMU_DIM, IMU_DIM>::zeros();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&-skew(&omega));
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&-Matrix3::identity());
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r * skew(&accel)));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&-r);
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&Matrix3::identity());
        let fdt = f * dt;
        let phi = nalgebra::SMatrix::<f64, IMU_DIM, IMU_DIM>::identity() + fdt + fdt * fdt * 0.5;

        let c = &self.config;
        let mut q = nalgebra::SMatrix::<f64, IMU_DIM, IMU_DIM>::zeros();
        let qg = (c.gyro_noise * dt).powi(2);
        let qa = (c.accel_noise * dt).powi(2);
        let qwg = c.gyro_walk.powi(2) * dt;
        let qwa = c.accel_walk.powi(2) * dt;
        let ra = r * r.transpose() * qa;
        for i in 0..3 {
            q[(i, i)] = qg;
            q[(9 + i, 9 + i)] = qwg;
            q[(12 + i, 12 + i)] = qwa;
        }
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra);

        let p = &mut self.state.covariance;
        let n = p.nrows();
        let phi_d = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, phi.as_slice());
        let pii = p.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
        let new_ii = &phi_d * pii * phi_d.transpose() + DMatrix::from_column_slice(IMU_DIM, IMU_DIM, q.as_slice());
        p.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&new_ii);
        if n > IMU_DIM {
            let pir = p.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).into_owned();
            let new_ir = &phi_d * pir;
            p.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&new_ir);
            p.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&new_ir.transpose());
        }
        self.state.symmetrize();

        self.state.imu.nav = integrate_interval(&imu.nav, &prev, sample, &imu.gyro_bias, &imu.accel_bias);
        self.state.t = sample.t;
        self.last_sample = Some(*sample);
        Ok(())
    }

    /// Clones the current IMU pose into the window, dropping the oldest clone when the
    /// window exceeds its size. Returns the new clone id.
    pub fn clone_and_marginalize(&mut self) -> u64 {
        let st = &mut self.state;
        let at = IMU_DIM + POSE_DIM * st.clones.len();
        let n = st.covariance.nrows();
        let mut j = DMatrix::zeros(POSE_DIM, n);
        for i in 0..3 {
            j[(i, i)] = 1.0;
            j[(3 + i, 6 + i)] = 1.0;
        }
        let cross = &j * &st.covariance;
        let diag = &cross * j.transpose();
        st.covariance = insert_block(&st.covariance, at, &cross, &diag);
        let id = self.next_clone;
        self.next_clone += 1;
        st.clones.push_back(ClonePose { id, t: st.t, pose: st.imu.nav.pose() });
        while st.clones.len() > self.config.window {
            let old = st.clones.pop_front().expect("window is non-empty");
            let cov = std::mem::replace(&mut st.covariance, DMatrix::zeros(0, 0));
            st.covariance = remove_block(cov, IMU_DIM, POSE_DIM);
            for t in self.tracks.values_mut() {
                t.observations.retain(|o| o.0 != old.id);
            }
        }
        id
    }

    /// Linear triangulation refined by Gauss-Newton on pixel error, in the local frame.
    fn triangulate(&self, track: &FeatureTrack) -> Option<Vector3<f64>> {
        let mut views = Vec::with_capacity(track.observations.len());
        for (clone, cam, px) in &track.observations {
            let k = self.state.clone_index(*clone)?;
            let cam = self.rig.get(*cam)?;
            let local_t_cam = self.state.clones[k].pose * cam.imu_t_cam;
            views.push((local_t_cam, cam, *px));
        }
        let mut a = Matrix3::zeros();
        let mut b = Vector3::zeros();
        for (pose, cam, px) in &views {
            let bearing = pose.rotation.rotate(&cam.intrinsics.normalized(px).normalize());
            let proj = Matrix3::identity() - bearing * bearing.transpose();
            a += proj;
            b += proj * pose.translation;
        }
        let eig = a.symmetric_eigenvalues();
        if eig.min() < 1e-6 * eig.max().max(1e-12) {
            return None;
        }
        let mut x = a.cholesky()?.solve(&b);
        for _ in 0..5 {
            let mut h = Matrix3::zeros();
            let mut g = Vector3::zeros();
            for (pose, cam, px) in &views {
                let inv = pose.inverse();
                let p_c = inv.transform_point(&x);
                let (pred, jp) = pixel_and_jacobian(cam, &p_c)?;
                let j = jp * inv.rotation.matrix();
                let r = pred - px;
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
            let step = h.cholesky()?.solve(&-g);
            x += step;
            if step.norm() < 1e-10 * (1.0 + x.norm()) {
                break;
            }
        }
        let c = &self.config;
        for (pose, _, _) in &views {
            let depth = pose.inverse().transform_point(&x).z;
            if !(depth >= c.min_depth && depth <= c.max_depth) {
                return None;
            }
        }
        Some(x)
    }

    /// Pixel of local point `x_l` in `camera` at clone `k`, with Jacobians with respect to
    /// the clone (θ, p) and to `x_l`.
    fn clone_measurement(
        &self,
        k: usize,
        camera: usize,
        x_l: &Vector3<f64>,
    ) -> Option<(Vector2<f64>, Matrix2x3<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
        let cam = &self.rig[camera];
        let pose = &self.state.clones[k].pose;
        let r = pose.rotation.matrix();
        let ric = cam.imu_t_cam.rotation.matrix();
        let y = r.transpose() * (x_l - pose.translation);
        let p_c = ric.transpose() * (y - cam.imu_t_cam.translation);
        let (px, jp) = pixel_and_jacobian(cam, &p_c)?;
        let a = jp * ric.transpose();
        Some((px, a * skew(&y), -a * r.transpose(), a * r.transpose()))
    }

    /// Builds one local feature's rows; `None` when triangulation or projection fails.
    fn local_rows(&self, track: &FeatureTrack) -> Option<FeatureRows> {
        self.local_rows_at(track, &self.triangulate(track)?)
    }

    fn local_rows_at(&self, track: &FeatureTrack, x: &Vector3<f64>) -> Option<FeatureRows> {
        let mut rows = FeatureRows::new();
        for (clone, cam, px) in &track.observations {
            let k = self.state.clone_index(*clone)?;
            let (pred, j_th, j_p, j_x) = self.clone_measurement(k, *cam, x)?;
            let o = self.state.clone_offset(k);
            rows.push(px - pred, &[(o, j_th), (o + 3, j_p)], &j_x, self.config.pixel_sigma);
        }
        Some(rows)
    }

    /// MSCKF update with tracked features. Tracks need at least two clones in the window.
    pub fn update_local(&mut self, tracks: &[FeatureTrack]) -> UpdateStats {
        let mut stats = UpdateStats::default();
        let mut blocks = Vec::new();
        for t in tracks {
            let in_window = t.observations.iter().filter(|o| self.state.clone_index(o.0).is_some()).count();
            if in_window < 2 {
                stats.skipped += 1;
                continue;
            }
            match self.local_rows(t) {
                Some(rows) if rows.len() > 3 => blocks.push(rows),
                _ => stats.skipped += 1,
            }
        }
        self.update_with(blocks, &mut stats);
        stats
    }

    /// Null-space projection, gating and the Schmidt update for a set of feature blocks.
    fn update_with(&mut self, blocks: Vec<FeatureRows>, stats: &mut UpdateStats) {
        let dim = self.state.dim();
        let mut rs: Vec<DVector<f64>> = Vec::new();
        let mut hs: Vec<DMatrix<f64>> = Vec::new();
        for rows in blocks {
            let (r, hx, hf) = rows.dense(dim);
            let n = left_null_space(&hf);
            let residual = if n.ncols() == 0 { 0.0 } else { (n.transpose() * &hf).abs().max() };
            self.diagnostics.projections += 1;
            self.diagnostics.max_null_space_residual = self.diagnostics.max_null_space_residual.max(residual);
            let r_o = n.transpose() * r;
            let h_o = n.transpose() * hx;
            let s = &h_o * &self.state.covariance * h_o.transpose() + DMatrix::identity(r_o.len(), r_o.len());
            let Some(chol) = s.cholesky() else {
                stats.skipped += 1;
                continue;
            };
            let gamma = r_o.dot(&chol.solve(&r_o));
            if gamma > self.chi2.threshold(r_o.len()) {
                stats.gated += 1;
                continue;
            }
            stats.accepted += 1;
            rs.push(r_o);
            hs.push(h_o);
        }
        if rs.is_empty() {
            return;
        }
        let m: usize = rs.iter().map(|r| r.len()).sum();
        let mut r = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, dim);
        let mut row = 0;
        for (ri, hi) in rs.iter().zip(&hs) {
            r.rows_mut(row, ri.len()).copy_from(ri);
            h.view_mut((row, 0), (hi.nrows(), dim)).copy_from(hi);
            row += ri.len();
        }
        self.schmidt_update(&h, &r);
    }

    /// Schmidt-Kalman update with whitened `h`, `r`: active mean and covariance rows are
    /// corrected, nuisance mean and `P_NN` are left untouched.
    fn schmidt_update(&mut self, h: &DMatrix<f64>, r: &DVector<f64>) {
        let a = self.state.active_dim();
        let dim = self.state.dim();
        let p = &self.state.covariance;
        let pht = p * h.transpose();
        let s = h * &pht + DMatrix::identity(h.nrows(), h.nrows());
        let Some(chol) = s.cholesky() else { return };
        let l_a = pht.rows(0, a).into_owned();
        let k_a = chol.solve(&l_a.transpose()).transpose();
        let dx = &k_a * r;
        // P_AA -= K L_Aᵀ, P_AN -= K L_Nᵀ.
        let correction = &k_a * pht.transpose();
        let mut p = self.state.covariance.clone();
        let upd = p.view((0, 0), (a, dim)).into_owned() - &correction;
        p.view_mut((0, 0), (a, dim)).copy_from(&upd);
        if dim > a {
            let an = upd.columns(a, dim - a).transpose();
            p.view_mut((a, 0), (dim - a, a)).copy_from(&an);
        }
        self.state.covariance = p;
        self.state.symmetrize();
        self.state.apply_correction(&dx);
    }

    /// Adds map `map` to the state with `map_T_local` from `reg`.
    pub fn register_map(&mut self, map: MapBundle<f64>, reg: &Registration) -> Result<(), FilterError> {
        let id = map.id();
        if self.maps.contains_key(&id) {
            return Err(FilterError::DuplicateMap(id));
        }
        let st = &mut self.state;
        let local_t_imu = st.imu.nav.pose();
        let g_t_l = reg.map_t_imu * local_t_imu.inverse();
        let r_gl = g_t_l.rotation.matrix();
        let r_li = local_t_imu.rotation.matrix();
        let n = st.covariance.nrows();

        // Sensitivity to the current IMU pose for a fixed measured map_T_imu.
        let mut j_i = DMatrix::zeros(POSE_DIM, n);
        j_i.view_mut((0, 0), (3, 3)).copy_from(&-r_li);
        j_i.view_mut((3, 0), (3, 3)).copy_from(&(-r_gl * skew(&local_t_imu.translation) * r_li));
        j_i.view_mut((3, 6), (3, 3)).copy_from(&-r_gl);

        // Sensitivity to the initializer's (yaw, t): map_T_local = q_T_map⁻¹ · C.
        let c = reg.q_t_imu * local_t_imu.inverse();
        let rz = Rotation::from_yaw(-reg.yaw).matrix();
        let ez = Vector3::z();
        let mut j_y = nalgebra::SMatrix::<f64, 6, 4>::zeros();
        j_y.fixed_view_mut::<3, 1>(0, 0).copy_from(&(-(c.rotation.matrix().transpose() * ez)));
        j_y.fixed_view_mut::<3, 1>(3, 0).copy_from(&(-ez.cross(&g_t_l.translation)));
        j_y.fixed_view_mut::<3, 3>(3, 1).copy_from(&-rz);
        let cfg = &self.config;
        let mut diag = j_y * reg.yaw_pose_covariance * j_y.transpose() * cfg.registration_inflation;
        let floors = [
            cfg.registration_tilt_std,
            cfg.registration_tilt_std,
            cfg.registration_yaw_std,
            cfg.registration_position_std,
            cfg.registration_position_std,
            cfg.registration_position_std,
        ];
        for (i, f) in floors.iter().enumerate() {
            diag[(i, i)] += f * f;
        }
        let cross = &j_i * &st.covariance;
        let diag = DMatrix::from_column_slice(6, 6, diag.as_slice()) + &cross * j_i.transpose();
        let at = st.active_dim();
        st.covariance = insert_block(&st.covariance, at, &cross, &diag);
        st.maps.push(MapTransform { map: id, transform: g_t_l });
        st.symmetrize();
        self.maps.insert(id, map);
        Ok(())
    }

    /// Lifts a map keyframe into the nuisance block if needed; returns its index.
    fn lift_keyframe(&mut self, map: u32, keyframe: u32, pose: RigidTransform<f64>) -> usize {
        self.use_counter += 1;
        self.keyframe_use.insert((map, keyframe), self.use_counter);
        if let Some(i) = self.state.keyframe_index(map, keyframe) {
            return i;
        }
        let st = &mut self.state;
        let n = st.covariance.nrows();
        let pos = self.config.keyframe_position_std.powi(2);
        let rot = self.config.keyframe_rotation_std.powi(2);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![rot, rot, rot, pos, pos, pos]));
        st.covariance = insert_block(&st.covariance, n, &DMatrix::zeros(POSE_DIM, n), &diag);
        st.keyframes.push(KeyframeState { map, keyframe, pose });
        st.keyframes.len() - 1
    }

    /// Drops the least recently used nuisance keyframes beyond the configured count.
    fn evict_keyframes(&mut self) {
        while self.state.keyframes.len() > self.config.max_keyframes {
            let (i, _) = self
                .state
                .keyframes
                .iter()
                .enumerate()
                .min_by_key(|(_, k)| self.keyframe_use.get(&(k.map, k.keyframe)).copied().unwrap_or(0))
                .expect("keyframes are non-empty");
            let k = self.state.keyframes.remove(i);
            self.keyframe_use.remove(&(k.map, k.keyframe));
            let at = self.state.keyframe_offset(i);
            let cov = std::mem::replace(&mut self.state.covariance, DMatrix::zeros(0, 0));
            self.state.covariance = remove_block(cov, at, POSE_DIM);
        }
    }

    /// Keyframes of `map` observing `landmark`, closest first to `near` (map frame).
    fn anchor_keyframes(
        &self,
        map: u32,
        landmark: u32,
        near: &Vector3<f64>,
    ) -> Vec<(u32, RigidTransform<f64>, Vector2<f64>)> {
        let Some(bundle) = self.maps.get(&map) else {
            return Vec::new();
        };
        let Some(lm) = bundle.landmark(landmark) else {
            return Vec::new();
        };
        let mut anchors: Vec<_> = lm
            .observers
            .iter()
            .filter_map(|&kf| {
                let px = bundle.keyframe_observation(kf, landmark)?;
                Some((kf, bundle.keyframe(kf)?.pose, px))
            })
            .collect();
        anchors.sort_by(|a, b| {
            let da = (a.1.translation - near).norm();
            let db = (b.1.translation - near).norm();
            da.total_cmp(&db).then(a.0.cmp(&b.0))
        });
        anchors.truncate(self.config.keyframes_per_feature);
        anchors
    }

    /// Rows of one map feature against map `k`: the current image (via clone `c`), anchor
    /// keyframes of map `k`, and anchor keyframes of the associated map, if registered.
    fn map_rows(&mut self, c: usize, k: usize, feature: &MapFeature) -> Option<FeatureRows> {
        let map_id = self.state.maps[k].map;
        let f = self.maps.get(&map_id)?.landmark(feature.landmark)?.position;
        let sigma = self.config.pixel_sigma * self.config.map_noise_inflation;
        let with_states = self.config.keyframes_are_states();
        let g_t_l = self.state.maps[k].transform;
        let r_gl = g_t_l.rotation.matrix();
        let x_l = r_gl.transpose() * (f - g_t_l.translation);
        let dxl_dth = skew(&x_l);
        let dxl_dp = -r_gl.transpose();
        let dxl_df = r_gl.transpose();

        let mut rows = FeatureRows::new();
        let (pred, j_th, j_p, j_x) = self.clone_measurement(c, feature.camera, &x_l)?;
        let co = self.state.clone_offset(c);
        let mo = self.state.map_offset(k);
        rows.push(
            feature.pixel - pred,
            &[(co, j_th), (co + 3, j_p), (mo, j_x * dxl_dth), (mo + 3, j_x * dxl_dp)],
            &(j_x * dxl_df),
            sigma,
        );

        let cam_local = self.state.clones[c].pose * self.rig[feature.camera].imu_t_cam;
        let cam_in_map = g_t_l * cam_local;
        let intrinsics = *self.maps[&map_id].intrinsics();
        let kf_model = CameraModel::new(0, intrinsics, RigidTransform::identity());
        let mut kf_rows = 0;
        for (kf, pose, px) in self.anchor_keyframes(map_id, feature.landmark, &cam_in_map.translation) {
            let lifted = with_states.then(|| self.lift_keyframe(map_id, kf, pose));
            let pose = lifted.map_or(pose, |i| self.state.keyframes[i].pose);
            let p_c = pose.inverse().transform_point(&f);
            let Some((pred, jp)) = pixel_and_jacobian(&kf_model, &p_c) else { continue };
            let rt = pose.rotation.matrix().transpose();
            let mut blocks = Vec::new();
            if let Some(i) = lifted {
                let o = self.state.keyframe_offset(i);
                blocks.push((o, jp * skew(&p_c)));
                blocks.push((o + 3, -jp * rt));
            }
            rows.push(px - pred, &blocks, &(jp * rt), sigma);
            kf_rows += 1;
        }

        if let Some((other, landmark)) = feature.cross {
            if let Some(s) = self.state.map_index(other) {
                let g_t_l_s = self.state.maps[s].transform;
                let r_ls = g_t_l_s.rotation.matrix();
                let f_s = g_t_l_s.transform_point(&x_l);
                let intrinsics = *self.maps[&other].intrinsics();
                let model = CameraModel::new(0, intrinsics, RigidTransform::identity());
                let near = g_t_l_s.transform_point(&cam_local.translation);
                for (kf, pose, px) in self.anchor_keyframes(other, landmark, &near) {
                    let lifted = with_states.then(|| self.lift_keyframe(other, kf, pose));
                    let pose = lifted.map_or(pose, |i| self.state.keyframes[i].pose);
                    let p_c = pose.inverse().transform_point(&f_s);
                    let Some((pred, jp)) = pixel_and_jacobian(&model, &p_c) else { continue };
                    let rt = pose.rotation.matrix().transpose();
                    let a = jp * rt;
                    let so = self.state.map_offset(s);
                    let ko = self.state.map_offset(k);
                    let mut blocks = vec![
                        (so, -a * r_ls * skew(&x_l)),
                        (so + 3, a),
                        (ko, a * r_ls * dxl_dth),
                        (ko + 3, a * r_ls * dxl_dp),
                    ];
                    if let Some(i) = lifted {
                        let o = self.state.keyframe_offset(i);
                        blocks.push((o, jp * skew(&p_c)));
                        blocks.push((o + 3, -a));
                    }
                    rows.push(px - pred, &blocks, &(a * r_ls * dxl_df), sigma);
                    kf_rows += 1;
                }
            }
        }
        (kf_rows > 0).then_some(rows)
    }

    /// Map-feature update against a registered map with the Schmidt rule.
    pub fn update_map(&mut self, obs: &MapObservation) -> Result<UpdateStats, FilterError> {
        let k = self.state.map_index(obs.map).ok_or(FilterError::UnknownMap(obs.map))?;
        let c = self.state.clone_index(obs.clone).ok_or(FilterError::EmptyWindow)?;
        if let Some(f) = obs.features.iter().find(|f| f.camera >= self.rig.len()) {
            return Err(FilterError::UnknownCamera(f.camera));
        }
        let mut stats = UpdateStats::default();
        let mut blocks = Vec::with_capacity(obs.features.len());
        for f in &obs.features {
            match self.map_rows(c, k, f) {
                Some(rows) => blocks.push(rows),
                None => stats.skipped += 1,
            }
        }
        self.update_with(blocks, &mut stats);
        self.evict_keyframes();
        Ok(stats)
    }

    /// `map_T_imu = map_T_local · local_T_imu` from the current estimates.
    pub fn current_pose_in_map(&self, map: u32) -> Result<RigidTransform<f64>, FilterError> {
        let j = self.state.map_index(map).ok_or(FilterError::UnknownMap(map))?;
        Ok(self.state.maps[j].transform * self.state.imu.nav.pose())
    }

    /// Trace of the IMU pose covariance (attitude and position).
    pub fn pose_covariance_trace(&self) -> f64 {
        let p = &self.state.covariance;
        (0..3).chain(6..9).map(|i| p[(i, i)]).sum()
    }

    /// Records for the current time: one local record and one per registered map.
    pub fn pose_records(&self) -> Vec<PoseRecord> {
        let local = self.state.imu.nav.pose();
        let trace = self.pose_covariance_trace();
        let mut out =
            vec![PoseRecord { t: self.state.t, map: None, pose: local, local_pose: local, covariance_trace: trace }];
        for (j, m) in self.state.maps.iter().enumerate() {
            let o = self.state.map_offset(j);
            let p = &self.state.covariance;
            let map_trace: f64 = (o..o + POSE_DIM).map(|i| p[(i, i)]).sum();
            out.push(PoseRecord {
                t: self.state.t,
                map: Some(m.map),
                pose: m.transform * local,
                local_pose: local,
                covariance_trace: trace + map_trace,
            });
        }
        out
    }

    /// Feeds one image: updates with tracks leaving the window, clones, records the new
    /// observations and updates with tracks that ended. Returns the new clone id.
    pub fn process_tracks(&mut self, observations: &[(u32, usize, Vector2<f64>)]) -> (u64, UpdateStats) {
        let mut stats = UpdateStats::default();
        if self.state.clones.len() >= self.config.window {
            let oldest = self.state.clones[0].id;
            let leaving: Vec<u32> = self
                .tracks
                .iter()
                .filter(|(_, t)| t.observations.iter().any(|o| o.0 == oldest))
                .map(|(f, _)| *f)
                .collect();
            let ready: Vec<FeatureTrack> = leaving
                .iter()
                .filter_map(|f| self.tracks.remove(f))
                .filter(|t| t.observations.len() >= self.config.min_track_length)
                .collect();
            stats += self.update_local(&ready);
        }
        let id = self.clone_and_marginalize();
        let mut seen = std::collections::BTreeSet::new();
        for &(feature, camera, pixel) in observations {
            if camera >= self.rig.len() {
                continue;
            }
            seen.insert(feature);
            self.tracks
                .entry(feature)
                .or_insert_with(|| FeatureTrack { feature, observations: Vec::new() })
                .observations
                .push((id, camera, pixel));
        }
        let lost: Vec<u32> = self.tracks.keys().copied().filter(|f| !seen.contains(f)).collect();
        let ready: Vec<FeatureTrack> = lost
            .iter()
            .filter_map(|f| self.tracks.remove(f))
            .filter(|t| t.observations.len() >= self.config.min_track_length)
            .collect();
        stats += self.update_local(&ready);
        (id, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_model::Landmark;
    use crate::sim::{generate_scenario, generate_trajectory, ImuNoise, Scenario, SimConfig, TrajectoryKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn start_state(s: &Scenario) -> ImuState {
        ImuState::new(NavState {
            rotation: s.truth[0].pose.rotation,
            velocity: s.truth[0].velocity,
            position: s.truth[0].pose.translation,
        })
    }

    fn exact_scenario() -> Scenario {
        generate_scenario(&SimConfig {
            duration: 6.0,
            maps: 2,
            cameras: 2,
            match_rate: 10.0,
            sigma_px: 0.0,
            outlier_rate: 0.0,
            imu_noise: ImuNoise::zero(),
            ..SimConfig::default()
        })
        .unwrap()
    }

    fn exact_registration(s: &Scenario, map: u32, sample: usize) -> Registration {
        let map_t_imu = s.map_t_local[&map] * s.truth[sample].pose;
        let attitude = s.truth[sample].pose.rotation;
        let frame = QueryFrame::new(&attitude, &s.rig, 0).unwrap();
        Registration {
            map_t_imu,
            yaw_pose_covariance: nalgebra::Matrix4::identity() * 1e-6,
            q_t_imu: *frame.q_t_imu(),
            yaw: frame.yaw_pose_from(&map_t_imu).yaw,
        }
    }

    /// Runs the exact scenario through its first match frames with both maps registered,
    /// returning the filter and the last match frame index.
    fn running_filter(s: &Scenario, frames: usize) -> (Filter, usize) {
        let mut f = Filter::new(FilterConfig::default(), s.rig.clone(), start_state(s), 0.0).unwrap();
        let mut sample = 0;
        for frame in &s.frames[..frames] {
            while sample < s.imu.len() && s.imu[sample].t <= frame.t + 1e-12 {
                f.propagate(&s.imu[sample]).unwrap();
                sample += 1;
            }
            let obs: Vec<_> = frame.tracks.iter().map(|t| (t.feature, t.camera, t.pixel)).collect();
            f.process_tracks(&obs);
        }
        for map in [1, 2] {
            f.register_map(s.map(map).unwrap().clone(), &exact_registration(s, map, sample - 1)).unwrap();
        }
        (f, frames - 1)
    }

    fn map_observation(s: &Scenario, f: &Filter, frame: usize, map: u32) -> MapObservation {
        let m = s.matches.iter().find(|m| m.frame == frame && m.map == map).unwrap();
        let cross: HashMap<(u32, u32), (u32, u32)> = s
            .cross_map
            .iter()
            .flat_map(|a| {
                [((a.map_a, a.landmark_a), (a.map_b, a.landmark_b)), ((a.map_b, a.landmark_b), (a.map_a, a.landmark_a))]
            })
            .collect();
        MapObservation {
            map,
            clone: f.state().clones.back().unwrap().id,
            features: m
                .correspondences
                .iter()
                .map(|c| MapFeature {
                    landmark: c.landmark,
                    camera: c.camera,
                    pixel: c.pixel,
                    cross: cross.get(&(map, c.landmark)).copied(),
                })
                .collect(),
        }
    }

    fn assert_covariance_healthy(p: &DMatrix<f64>) {
        let asym = (p - p.transpose()).abs().max();
        assert!(asym <= 1e-9, "asymmetry {asym}");
        let min = p.clone().symmetric_eigenvalues().min();
        assert!(min >= -1e-9, "min eigenvalue {min}");
    }

    #[test]
    fn static_propagation_keeps_state() {
        let (_, imu) = generate_trajectory(&TrajectoryKind::Static, 1.0, 200.0).unwrap();
        let nav = NavState {
            rotation: Rotation::identity(),
            velocity: Vector3::zeros(),
            position: Vector3::new(1.0, 2.0, 3.0),
        };
        let mut f = Filter::new(FilterConfig::default(), crate::sim::standard_rig(1).unwrap(), ImuState::new(nav), 0.0)
            .unwrap();
        for s in &imu {
            f.propagate(s).unwrap();
        }
        let end = f.state().imu.nav;
        assert!((end.position - nav.position).norm() < 1e-9);
        assert!(end.velocity.norm() < 1e-9);
        assert!(end.rotation.angle_to(&nav.rotation) < 1e-9);
        assert_covariance_healthy(&f.state().covariance);
    }

    #[test]
    fn zero_noise_circle_tracks_truth() {
        let kind = TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.5 };
        let (truth, imu) = generate_trajectory(&kind, 10.0, 200.0).unwrap();
        let nav = NavState {
            rotation: truth[0].pose.rotation,
            velocity: truth[0].velocity,
            position: truth[0].pose.translation,
        };
        let mut f = Filter::new(FilterConfig::default(), crate::sim::standard_rig(1).unwrap(), ImuState::new(nav), 0.0)
            .unwrap();
        for (s, t) in imu.iter().zip(&truth) {
            f.propagate(s).unwrap();
            assert!((f.state().imu.nav.position - t.pose.translation).norm() < 1e-5);
        }
    }

    #[test]
    fn propagation_rejects_time_going_backwards() {
        let s = exact_scenario();
        let mut f = Filter::new(FilterConfig::default(), s.rig.clone(), start_state(&s), 0.0).unwrap();
        f.propagate(&s.imu[0]).unwrap();
        f.propagate(&s.imu[1]).unwrap();
        assert!(matches!(f.propagate(&s.imu[1]), Err(FilterError::NonMonotoneTime { .. })));
        assert!(matches!(f.propagate(&s.imu[0]), Err(FilterError::NonMonotoneTime { .. })));
    }

    #[test]
    fn propagation_leaves_map_states_untouched() {
        let s = exact_scenario();
        let (mut f, frame) = running_filter(&s, 12);
        let obs = map_observation(&s, &f, frame, 1);
        f.update_map(&obs).unwrap();
        assert!(!f.state().keyframes.is_empty());
        let maps = f.state().maps.clone();
        let kfs = f.state().keyframes.clone();
        let (_, _, pnn) = f.state().partition();
        let start = s.imu.partition_point(|x| x.t <= f.state().t + 1e-12);
        for sample in &s.imu[start..start + 50] {
            f.propagate(sample).unwrap();
        }
        assert_eq!(f.state().maps, maps);
        assert_eq!(f.state().keyframes, kfs);
        assert_eq!(f.state().partition().2, pnn);
    }

    #[test]
    fn clone_duplicates_pose_and_window_is_bounded() {
        let s = exact_scenario();
        let mut f = Filter::new(FilterConfig::default(), s.rig.clone(), start_state(&s), 0.0).unwrap();
        let id = f.clone_and_marginalize();
        let c = f.state().clones.back().unwrap();
        assert_eq!(c.id, id);
        assert_eq!(c.pose, f.state().imu.nav.pose());
        let p = &f.state().covariance;
        let o = f.state().clone_offset(0);
        assert_eq!(p[(o + 3, o + 3)], p[(6, 6)]);
        for _ in 0..1000 {
            f.clone_and_marginalize();
            assert!(f.state().clones.len() <= f.config().window);
        }
    }

    #[test]
    fn dimension_bookkeeping_under_random_cycles() {
        let s = exact_scenario();
        let (mut f, frame) = running_filter(&s, 12);
        f.update_map(&map_observation(&s, &f, frame, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            for _ in 0..rng.random_range(1..4) {
                f.clone_and_marginalize();
            }
            let st = f.state();
            assert_eq!(st.covariance.nrows(), st.dim());
            assert_eq!(st.dim(), IMU_DIM + 6 * (st.clones.len() + st.maps.len() + st.keyframes.len()));
        }
    }

    fn keyframe_perturbed(f: &Filter, i: usize, axis: usize, eps: f64) -> Filter {
        let mut g = f.clone();
        let mut d = Vector3::zeros();
        d[axis % 3] = eps;
        let kf = &mut g.state.keyframes[i];
        if axis < 3 {
            kf.pose.rotation = kf.pose.rotation * Rotation::exp(&d);
        } else {
            kf.pose.translation += d;
        }
        g
    }

    fn active_perturbed(f: &Filter, col: usize, eps: f64) -> Filter {
        let mut g = f.clone();
        let mut dx = DVector::zeros(g.state.active_dim());
        dx[col] = eps;
        g.state.apply_correction(&dx);
        g
    }

    /// Compares each column of the analytic Jacobian with central differences of the
    /// residual, which decreases with the prediction.
    fn check_state_jacobian(f: &mut Filter, rows_of: impl Fn(&mut Filter) -> FeatureRows) {
        let rows = rows_of(f);
        let dim = f.state.dim();
        let (_, hx, _) = rows.dense(dim);
        let eps = 1e-6;
        for col in 0..dim {
            let (mut plus, mut minus) = if col < f.state.active_dim() {
                (active_perturbed(f, col, eps), active_perturbed(f, col, -eps))
            } else {
                let i = (col - f.state.active_dim()) / 6;
                let axis = (col - f.state.active_dim()) % 6;
                (keyframe_perturbed(f, i, axis, eps), keyframe_perturbed(f, i, axis, -eps))
            };
            let rp = rows_of(&mut plus).dense(dim).0;
            let rm = rows_of(&mut minus).dense(dim).0;
            let numeric = -(rp - rm) / (2.0 * eps);
            let err = (numeric - hx.column(col)).abs().max();
            assert!(err < 1e-4 * (1.0 + hx.column(col).abs().max()), "column {col}: {err}");
        }
    }

    #[test]
    fn local_jacobians_match_finite_differences() {
        let s = exact_scenario();
        let (mut f, _) = running_filter(&s, 8);
        let track = f.tracks.values().find(|t| t.observations.len() >= 4).cloned().unwrap();
        let x = f.triangulate(&track).unwrap();
        check_state_jacobian(&mut f, |g| g.local_rows_at(&track, &x).unwrap());
        let (_, _, hf) = f.local_rows_at(&track, &x).unwrap().dense(f.state.dim());
        for axis in 0..3 {
            let mut d = Vector3::zeros();
            d[axis] = 1e-6;
            let rp = f.local_rows_at(&track, &(x + d)).unwrap().dense(f.state.dim()).0;
            let rm = f.local_rows_at(&track, &(x - d)).unwrap().dense(f.state.dim()).0;
            let numeric = -(rp - rm) / 2e-6;
            assert!((numeric - hf.column(axis)).abs().max() < 1e-4 * (1.0 + hf.column(axis).abs().max()));
        }
    }

    fn with_landmark_moved(f: &Filter, map: u32, landmark: u32, d: Vector3<f64>) -> Filter {
        let mut g = f.clone();
        let b = &f.maps[&map];
        let landmarks: Vec<Landmark<f64>> = b
            .landmarks()
            .iter()
            .map(|l| {
                let mut l = l.clone();
                if l.id == landmark {
                    l.position += d;
                }
                l
            })
            .collect();
        g.maps.insert(map, MapBundle::new(map, *b.intrinsics(), b.keyframes().to_vec(), landmarks).unwrap());
        g
    }

    #[test]
    fn map_jacobians_match_finite_differences() {
        let s = exact_scenario();
        let (mut f, frame) = running_filter(&s, 30);
        let obs = map_observation(&s, &f, frame, 2);
        let feature =
            *obs.features.iter().find(|x| x.cross.is_some()).expect("scenario has a cross-map feature in view");
        let c = f.state.clone_index(obs.clone).unwrap();
        let k = f.state.map_index(2).unwrap();
        let rows = f.map_rows(c, k, &feature).unwrap();
        // Current image, two own keyframes and at least one keyframe of the other map.
        assert!(rows.len() >= 8, "{}", rows.len());
        check_state_jacobian(&mut f, |g| g.map_rows(c, k, &feature).unwrap());

        let (_, _, hf) = f.map_rows(c, k, &feature).unwrap().dense(f.state.dim());
        for axis in 0..3 {
            let mut d = Vector3::zeros();
            d[axis] = 1e-6;
            let mut plus = with_landmark_moved(&f, 2, feature.landmark, d);
            let mut minus = with_landmark_moved(&f, 2, feature.landmark, -d);
            let dim = f.state.dim();
            let rp = plus.map_rows(c, k, &feature).unwrap().dense(dim).0;
            let rm = minus.map_rows(c, k, &feature).unwrap().dense(dim).0;
            let numeric = -(rp - rm) / 2e-6;
            assert!((numeric - hf.column(axis)).abs().max() < 1e-4 * (1.0 + hf.column(axis).abs().max()));
        }
    }

    #[test]
    fn null_space_has_expected_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..8 {
            let hf = DMatrix::from_fn(2 * n, 3, |_, _| rng.random_range(-300.0..300.0));
            let ns = left_null_space(&hf);
            assert_eq!(ns.ncols(), 2 * n - 3);
            assert!((ns.transpose() * &hf).abs().max() < 1e-10);
            assert!((ns.transpose() * &ns - DMatrix::identity(2 * n - 3, 2 * n - 3)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_updates_leave_state_unchanged() {
        let s = exact_scenario();
        let (mut f, frame) = running_filter(&s, 12);
        let before = f.state().clone();
        let tracks: Vec<FeatureTrack> = f.tracks.values().filter(|t| t.observations.len() >= 3).cloned().collect();
        assert!(!tracks.is_empty());
        let stats = f.update_local(&tracks);
        assert!(stats.accepted > 0);
        let diff = |a: &FilterState, b: &FilterState| {
            let mut d = (a.imu.nav.position - b.imu.nav.position).norm();
            d = d.max(a.imu.nav.rotation.angle_to(&b.imu.nav.rotation));
            d = d.max((a.imu.nav.velocity - b.imu.nav.velocity).norm());
            for (x, y) in a.clones.iter().zip(&b.clones) {
                d = d.max((x.pose.translation - y.pose.translation).norm());
            }
            for (x, y) in a.maps.iter().zip(&b.maps) {
                d = d.max((x.transform.translation - y.transform.translation).norm());
                d = d.max(x.transform.rotation.angle_to(&y.transform.rotation));
            }
            d
        };
        assert!(diff(&before, f.state()) < 1e-10, "{}", diff(&before, f.state()));

        let before = f.state().clone();
        let stats = f.update_map(&map_observation(&s, &f, frame, 1)).unwrap();
        assert!(stats.accepted > 0);
        assert!(diff(&before, f.state()) < 1e-10);
        assert_covariance_healthy(&f.state().covariance);
    }

    #[test]
    fn schmidt_update_freezes_nuisance_block() {
        let s = generate_scenario(&SimConfig {
            duration: 6.0,
            maps: 2,
            cameras: 2,
            match_rate: 10.0,
            outlier_rate: 0.0,
            ..SimConfig::default()
        })
        .unwrap();
        let (mut f, frame) = running_filter(&s, 30);
        f.update_map(&map_observation(&s, &f, frame, 1)).unwrap();
        let kfs = f.state().keyframes.clone();
        let (paa, _, pnn) = f.state().partition();
        let stats = f.update_map(&map_observation(&s, &f, frame, 1)).unwrap();
        assert!(stats.accepted > 0);
        assert_eq!(&f.state().keyframes[..kfs.len()], &kfs[..]);
        let (paa2, _, pnn2) = f.state().partition();
        assert_eq!(pnn2.view((0, 0), (pnn.nrows(), pnn.ncols())), pnn);
        assert!(paa2.trace() < paa.trace());
        assert_covariance_healthy(&f.state().covariance);
    }

    #[test]
    fn registration_grows_state_and_rejects_duplicates() {
        let s = exact_scenario();
        let mut f = Filter::new(FilterConfig::default(), s.rig.clone(), start_state(&s), 0.0).unwrap();
        f.propagate(&s.imu[0]).unwrap();
        let dim = f.state().dim();
        f.register_map(s.map(1).unwrap().clone(), &exact_registration(&s, 1, 0)).unwrap();
        assert_eq!(f.state().dim(), dim + 6);
        assert_eq!(
            f.register_map(s.map(1).unwrap().clone(), &exact_registration(&s, 1, 0)),
            Err(FilterError::DuplicateMap(1))
        );
        assert_covariance_healthy(&f.state().covariance);
        let truth = s.map_t_local[&1];
        let est = f.state().maps[0].transform;
        assert!((est.translation - truth.translation).norm() < 1e-9);
        assert!(est.rotation.angle_to(&truth.rotation) < 1e-9);
        let obs = MapObservation { map: 3, clone: 0, features: Vec::new() };
        assert_eq!(f.update_map(&obs), Err(FilterError::UnknownMap(3)));
        assert_eq!(f.current_pose_in_map(3), Err(FilterError::UnknownMap(3)));
    }

    #[test]
    fn pose_in_map_is_the_composition() {
        let s = exact_scenario();
        let mut f = Filter::new(FilterConfig::default(), s.rig.clone(), start_state(&s), 0.0).unwrap();
        for sample in &s.imu[..40] {
            f.propagate(sample).unwrap();
        }
        f.register_map(s.map(2).unwrap().clone(), &exact_registration(&s, 2, 39)).unwrap();
        let expected = f.state().maps[0].transform.to_homogeneous() * f.state().imu.nav.pose().to_homogeneous();
        let got = f.current_pose_in_map(2).unwrap().to_homogeneous();
        assert!((expected - got).abs().max() < 1e-12);
        let truth = s.map_t_local[&2] * s.truth[39].pose;
        assert!((got - truth.to_homogeneous()).abs().max() < 1e-9);
    }

    #[test]
    fn keyframes_as_constants_skip_nuisance_states() {
        let s = exact_scenario();
        let mut f = Filter::new(
            FilterConfig { keyframe_position_std: 0.0, keyframe_rotation_std: 0.0, ..FilterConfig::default() },
            s.rig.clone(),
            start_state(&s),
            0.0,
        )
        .unwrap();
        let frame = 12;
        let mut sample = 0;
        for fr in &s.frames[..frame] {
            while s.imu[sample].t <= fr.t + 1e-12 {
                f.propagate(&s.imu[sample]).unwrap();
                sample += 1;
            }
            f.process_tracks(&fr.tracks.iter().map(|t| (t.feature, t.camera, t.pixel)).collect::<Vec<_>>());
        }
        f.register_map(s.map(1).unwrap().clone(), &exact_registration(&s, 1, sample - 1)).unwrap();
        let stats = f.update_map(&map_observation(&s, &f, frame - 1, 1)).unwrap();
        assert!(stats.accepted > 0);
        assert!(f.state().keyframes.is_empty());
    }

    #[test]
    fn pose_record_csv_round_trips_floats() {
        let rec = PoseRecord {
            t: 0.1,
            map: Some(2),
            pose: RigidTransform::new(Rotation::from_yaw(0.3), Vector3::new(1.0 / 3.0, 2.0, -1.5)),
            local_pose: RigidTransform::identity(),
            covariance_trace: 1e-7,
        };
        let line = rec.to_csv();
        assert_eq!(line.split(',').count(), PoseRecord::CSV_HEADER.split(',').count());
        assert!(line.starts_with("0.1,2,0.3333333333333333,2,-1.5,"));
    }
}
