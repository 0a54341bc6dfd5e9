//! Synthetic scenarios: trajectories with exact IMU, camera rigs, landmark fields,
//! isolated maps, noisy tracks and 2D-3D correspondences with injected outliers.
//!
//! Everything here is `f64` and seeded; equal configurations produce byte-identical
//! serialized [`Scenario`]s.
//!
//! # Serialization
//!
//! A scenario is a single JSON object with a top-level `"version"` field (currently
//! [`SCENARIO_VERSION`]). Rotations are JPL quaternions `[x, y, z, w]`, vectors are arrays,
//! and each map is embedded as its `VILOMAP` text (see [`crate::map_model`]).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::camera::{body_camera_rotation, CameraModel, Correspondence, Intrinsics};
use crate::geometry::{gravity, RigidTransform, Rotation, YawPose};
use crate::imu::ImuSample;
use crate::map_model::{KeyframeObservation, Landmark, MapBundle, MapError, MapKeyframe};
use crate::solvers::QueryFrame;

pub const SCENARIO_VERSION: u32 = 1;

/// Outliers whose pixel lands this close to the true projection of their landmark are
/// redrawn.
pub const OUTLIER_EXCLUSION_PX: f64 = 20.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown trajectory kind `{0}`")]
    UnknownTrajectory(String),
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported scenario version {0}")]
    Version(u32),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Planar ground-vehicle motions with closed-form derivatives. The body heading follows
/// the velocity; roll and pitch stay zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    Static,
    Line {
        speed: f64,
    },
    /// Counter-clockwise circle through the origin, centered at `(0, radius)`.
    Circle {
        radius: f64,
        angular_rate: f64,
    },
    /// `x = ax sin ωt`, `y = ay sin 2ωt`.
    FigureEight {
        ax: f64,
        ay: f64,
        angular_rate: f64,
    },
}

impl FromStr for TrajectoryKind {
    type Err = SimError;

    /// Parses a kind name with default parameters.
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "static" => Ok(Self::Static),
            "line" => Ok(Self::Line { speed: 1.5 }),
            "circle" => Ok(Self::Circle { radius: 5.0, angular_rate: 0.5 }),
            "figure_eight" | "figure-eight" => Ok(Self::FigureEight { ax: 20.0, ay: 10.0, angular_rate: 0.06 }),
            other => Err(SimError::UnknownTrajectory(other.to_string())),
        }
    }
}

/// Position, velocity, acceleration, heading and heading rate at time `t`.
struct Kinematics {
    p: Vector3<f64>,
    v: Vector3<f64>,
    a: Vector3<f64>,
    yaw: f64,
    yaw_rate: f64,
}

impl TrajectoryKind {
    fn validate(&self) -> Result<(), SimError> {
        let bad = match *self {
            Self::Static => false,
            Self::Line { speed } => !(speed > 0.0),
            Self::Circle { radius, angular_rate } => !(radius > 0.0) || angular_rate == 0.0,
            Self::FigureEight { ax, ay, angular_rate } => !(ax > 0.0 && ay > 0.0) || angular_rate == 0.0,
        };
        if bad {
            return Err(SimError::InvalidParameter(format!("{self:?}")));
        }
        Ok(())
    }

    fn kinematics(&self, t: f64) -> Kinematics {
        match *self {
            Self::Static => {
                Kinematics { p: Vector3::zeros(), v: Vector3::zeros(), a: Vector3::zeros(), yaw: 0.0, yaw_rate: 0.0 }
            }
            Self::Line { speed } => Kinematics {
                p: Vector3::new(speed * t, 0.0, 0.0),
                v: Vector3::new(speed, 0.0, 0.0),
                a: Vector3::zeros(),
                yaw: 0.0,
                yaw_rate: 0.0,
            },
            Self::Circle { radius: r, angular_rate: w } => {
                let (s, c) = (w * t).sin_cos();
                Kinematics {
                    p: Vector3::new(r * s, r - r * c, 0.0),
                    v: Vector3::new(r * w * c, r * w * s, 0.0),
                    a: Vector3::new(-r * w * w * s, r * w * w * c, 0.0),
                    yaw: w * t,
                    yaw_rate: w,
                }
            }
            Self::FigureEight { ax, ay, angular_rate: w } => {
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                let v = Vector3::new(ax * w * c1, 2.0 * ay * w * c2, 0.0);
                let a = Vector3::new(-ax * w * w * s1, -4.0 * ay * w * w * s2, 0.0);
                Kinematics {
                    p: Vector3::new(ax * s1, ay * s2, 0.0),
                    v,
                    a,
                    yaw: v.y.atan2(v.x),
                    yaw_rate: (v.x * a.y - v.y * a.x) / (v.x * v.x + v.y * v.y),
                }
            }
        }
    }
}

/// Ground truth IMU state at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    /// `local_t_imu`.
    pub pose: RigidTransform<f64>,
    pub velocity: Vector3<f64>,
}

/// Samples `kind` at `rate` Hz over `[0, duration]` and returns the exact, noise-free IMU
/// readings at the same instants.
pub fn generate_trajectory(
    kind: &TrajectoryKind,
    duration: f64,
    rate: f64,
) -> Result<(Vec<TruthSample>, Vec<ImuSample<f64>>), SimError> {
    if !(duration > 0.0) || !(rate > 0.0) {
        return Err(SimError::InvalidParameter("duration and rate must be positive".into()));
    }
    kind.validate()?;
    let count = (duration * rate).round() as usize + 1;
    let g = gravity::<f64>();
    let mut truth = Vec::with_capacity(count);
    let mut imu = Vec::with_capacity(count);
    for k in 0..count {
        let t = k as f64 / rate;
        let kin = kind.kinematics(t);
        let rotation = Rotation::from_yaw(kin.yaw);
        truth.push(TruthSample { t, pose: RigidTransform::new(rotation, kin.p), velocity: kin.v });
        imu.push(ImuSample {
            t,
            gyro: Vector3::new(0.0, 0.0, kin.yaw_rate),
            accel: rotation.inverse().rotate(&(kin.a - g)),
        });
    }
    Ok((truth, imu))
}

/// Discrete IMU noise model. White noise terms are per-sample standard deviations; random
/// walk terms are in units per √s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_walk: f64,
    pub accel_walk: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_noise: 1.7e-3,
            accel_noise: 2.0e-2,
            gyro_walk: 2.0e-5,
            accel_walk: 3.0e-4,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

impl ImuNoise {
    pub fn zero() -> Self {
        Self {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_walk: 0.0,
            accel_walk: 0.0,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Adds biases, bias random walks and white noise to an exact IMU stream.
pub fn corrupt_imu(stream: &[ImuSample<f64>], noise: &ImuNoise, seed: u64) -> Result<Vec<ImuSample<f64>>, SimError> {
    let sigmas = [noise.gyro_noise, noise.accel_noise, noise.gyro_walk, noise.accel_walk];
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(SimError::InvalidParameter("noise standard deviations must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bg = noise.gyro_bias;
    let mut ba = noise.accel_bias;
    let mut prev_t = stream.first().map_or(0.0, |s| s.t);
    let mut out = Vec::with_capacity(stream.len());
    for s in stream {
        let dt = s.t - prev_t;
        prev_t = s.t;
        let walk_g = normal3(&mut rng) * (noise.gyro_walk * dt.max(0.0).sqrt());
        let walk_a = normal3(&mut rng) * (noise.accel_walk * dt.max(0.0).sqrt());
        bg += walk_g;
        ba += walk_a;
        let ng = normal3(&mut rng) * noise.gyro_noise;
        let na = normal3(&mut rng) * noise.accel_noise;
        out.push(ImuSample { t: s.t, gyro: s.gyro + bg + ng, accel: s.accel + ba + na });
    }
    Ok(out)
}

/// Default pinhole used by the simulated rigs.
pub fn default_intrinsics() -> Intrinsics<f64> {
    Intrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480)
}

/// A rig of 1, 2 or 4 outward-looking cameras (front; front+back; front, left, back,
/// right), each 10 cm from the IMU along its viewing direction.
pub fn standard_rig(cameras: usize) -> Result<Vec<CameraModel<f64>>, SimError> {
    let yaws: &[f64] = match cameras {
        1 => &[0.0],
        2 => &[0.0, std::f64::consts::PI],
        4 => &[0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI, -std::f64::consts::FRAC_PI_2],
        n => return Err(SimError::InvalidParameter(format!("rigs have 1, 2 or 4 cameras, not {n}"))),
    };
    Ok(yaws
        .iter()
        .enumerate()
        .map(|(k, &yaw)| {
            let offset = Rotation::from_yaw(yaw).rotate(&Vector3::new(0.1, 0.0, 0.0));
            CameraModel::new(k, default_intrinsics(), RigidTransform::new(body_camera_rotation(yaw), offset))
        })
        .collect())
}

/// Pixel noise drawn from an isotropic Gaussian truncated to `3 sigma` in norm.
pub fn truncated_pixel_noise(rng: &mut impl Rng, sigma: f64) -> Vector2<f64> {
    if sigma <= 0.0 {
        return Vector2::zeros();
    }
    loop {
        let n = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
        if n.norm() <= 3.0 {
            return n * sigma;
        }
    }
}

fn beta_weight(rng: &mut impl Rng, inlier: bool) -> f64 {
    let dist = if inlier { Beta::new(8.0, 2.0) } else { Beta::new(2.0, 5.0) };
    dist.expect("valid beta parameters").sample(rng)
}

/// Measurement generation parameters shared by scenarios and query cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceNoise {
    pub outlier_rate: f64,
    pub sigma_px: f64,
}

/// Correspondences between `cameras` at IMU pose `map_t_imu` and map points. Each visible
/// landmark becomes an inlier with projected pixel plus truncated noise, or with
/// probability `outlier_rate` an outlier: a uniform pixel paired with a random other
/// landmark.
pub fn generate_correspondences(
    map_id: u32,
    landmarks: &[(u32, Vector3<f64>)],
    rig: &[CameraModel<f64>],
    map_t_imu: &RigidTransform<f64>,
    noise: &CorrespondenceNoise,
    max_per_camera: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Correspondence<f64>>, SimError> {
    if !(0.0..1.0).contains(&noise.outlier_rate) || !(noise.sigma_px >= 0.0) {
        return Err(SimError::InvalidParameter("outlier rate must lie in [0, 1) and sigma be non-negative".into()));
    }
    let mut out = Vec::new();
    for cam in rig {
        let cam_t_map = (*map_t_imu * cam.imu_t_cam).inverse();
        let k = &cam.intrinsics;
        let mut visible: Vec<(u32, Vector3<f64>, Vector2<f64>)> = landmarks
            .iter()
            .filter_map(|(id, p)| {
                let px = k.project(&cam_t_map.transform_point(p))?;
                k.contains(&px).then_some((*id, *p, px))
            })
            .collect();
        if visible.len() > max_per_camera {
            visible.shuffle(rng);
            visible.truncate(max_per_camera);
            visible.sort_by_key(|v| v.0);
        }
        for (id, point, px) in visible {
            if rng.random_bool(noise.outlier_rate) && landmarks.len() > 1 {
                let (lid, lpos) = loop {
                    let cand = landmarks[rng.random_range(0..landmarks.len())];
                    if cand.0 != id {
                        break cand;
                    }
                };
                let true_px = k.project(&cam_t_map.transform_point(&lpos));
                let pixel = loop {
                    let p = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
                    if true_px.is_none_or(|t| (t - p).norm() > OUTLIER_EXCLUSION_PX) {
                        break p;
                    }
                };
                out.push(Correspondence {
                    camera: cam.id,
                    map: map_id,
                    landmark: lid,
                    pixel,
                    point: lpos,
                    weight: beta_weight(rng, false),
                    inlier: false,
                });
            } else {
                let pixel = noisy_pixel(rng, k, &px, noise.sigma_px);
                out.push(Correspondence {
                    camera: cam.id,
                    map: map_id,
                    landmark: id,
                    pixel,
                    point,
                    weight: beta_weight(rng, true),
                    inlier: true,
                });
            }
        }
    }
    Ok(out)
}

/// `px` plus truncated noise, redrawn until it stays inside the image.
fn noisy_pixel(rng: &mut impl Rng, k: &Intrinsics<f64>, px: &Vector2<f64>, sigma: f64) -> Vector2<f64> {
    for _ in 0..64 {
        let p = px + truncated_pixel_noise(rng, sigma);
        if k.contains(&p) {
            return p;
        }
    }
    *px
}

/// A single-query benchmark instance for the initializer and RANSAC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub rig: Vec<CameraModel<f64>>,
    /// IMU attitude in the local frame (its roll and pitch are shared with the map).
    pub attitude: Rotation<f64>,
    pub map_t_imu: RigidTransform<f64>,
    pub correspondences: Vec<Correspondence<f64>>,
}

impl QueryCase {
    pub fn frame(&self) -> QueryFrame<f64> {
        QueryFrame::new(&self.attitude, &self.rig, 0).expect("rig is non-empty")
    }

    /// Ground truth `q_t_map`.
    pub fn truth(&self) -> YawPose<f64> {
        self.frame().yaw_pose_from(&self.map_t_imu)
    }

    pub fn inlier_count(&self) -> usize {
        self.correspondences.iter().filter(|c| c.inlier).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryCaseConfig {
    pub correspondences: usize,
    /// Exact fraction of inliers (rounded to a count).
    pub inlier_rate: f64,
    pub sigma_px: f64,
    pub cameras: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Largest roll and pitch in radians.
    pub max_tilt: f64,
    pub seed: u64,
}

impl Default for QueryCaseConfig {
    fn default() -> Self {
        Self {
            correspondences: 100,
            inlier_rate: 0.5,
            sigma_px: 1.0,
            cameras: 1,
            min_depth: 2.0,
            max_depth: 25.0,
            max_tilt: 5f64.to_radians(),
            seed: 0,
        }
    }
}

/// Random query: inliers are spread round-robin over the cameras with uniformly
/// distributed pixels and depths; outliers pair uniform pixels with other in-view points.
/// The correspondence order is shuffled.
pub fn query_case(cfg: &QueryCaseConfig) -> Result<QueryCase, SimError> {
    if !(0.0..=1.0).contains(&cfg.inlier_rate) || !(cfg.min_depth > 0.0 && cfg.max_depth > cfg.min_depth) {
        return Err(SimError::InvalidParameter(format!("{cfg:?}")));
    }
    let rig = standard_rig(cfg.cameras)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pi = std::f64::consts::PI;
    let roll = rng.random_range(-cfg.max_tilt..=cfg.max_tilt);
    let pitch = rng.random_range(-cfg.max_tilt..=cfg.max_tilt);
    let map_yaw = rng.random_range(-pi..pi);
    let local_yaw = rng.random_range(-pi..pi);
    let map_t_imu = RigidTransform::new(
        Rotation::from_euler_zyx(map_yaw, pitch, roll),
        Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-1.0..1.0)),
    );
    let attitude = Rotation::from_euler_zyx(local_yaw, pitch, roll);
    let inliers = (cfg.correspondences as f64 * cfg.inlier_rate).round() as usize;

    let random_point = |rng: &mut ChaCha8Rng, cam: &CameraModel<f64>| {
        let k = &cam.intrinsics;
        let px = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
        let depth = rng.random_range(cfg.min_depth..cfg.max_depth);
        let p_c = k.normalized(&px) * depth;
        ((map_t_imu * cam.imu_t_cam).transform_point(&p_c), px)
    };

    let mut corrs = Vec::with_capacity(cfg.correspondences);
    for i in 0..cfg.correspondences {
        let cam = &rig[i % rig.len()];
        let k = &cam.intrinsics;
        if i < inliers {
            let (point, px) = random_point(&mut rng, cam);
            corrs.push(Correspondence {
                camera: cam.id,
                map: 0,
                landmark: i as u32,
                pixel: noisy_pixel(&mut rng, k, &px, cfg.sigma_px),
                point,
                weight: beta_weight(&mut rng, true),
                inlier: true,
            });
        } else {
            let other = &rig[rng.random_range(0..rig.len())];
            let (point, _) = random_point(&mut rng, other);
            let cam_t_map = (map_t_imu * cam.imu_t_cam).inverse();
            let true_px = k.project(&cam_t_map.transform_point(&point));
            let pixel = loop {
                let p = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
                if true_px.is_none_or(|t| (t - p).norm() > OUTLIER_EXCLUSION_PX) {
                    break p;
                }
            };
            corrs.push(Correspondence {
                camera: cam.id,
                map: 0,
                landmark: i as u32,
                pixel,
                point,
                weight: beta_weight(&mut rng, false),
                inlier: false,
            });
        }
    }
    corrs.shuffle(&mut rng);
    Ok(QueryCase { rig, attitude, map_t_imu, correspondences: corrs })
}

/// Full scenario configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub trajectory: TrajectoryKind,
    pub duration: f64,
    pub imu_rate: f64,
    pub camera_rate: f64,
    /// Rate of map correspondence sets.
    pub match_rate: f64,
    pub cameras: usize,
    /// Landmarks generated per meter of path (at least 40 for a static trajectory).
    pub landmarks_per_meter: f64,
    pub landmark_min_range: f64,
    pub landmark_max_range: f64,
    /// Landmarks farther than this are not tracked.
    pub max_track_range: f64,
    pub max_tracks_per_camera: usize,
    pub maps: usize,
    /// Fraction of each map's time segment covered by keyframes.
    pub map_coverage: f64,
    pub keyframe_spacing: f64,
    pub max_correspondences_per_camera: usize,
    pub sigma_px: f64,
    pub outlier_rate: f64,
    pub imu_noise: ImuNoise,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Line { speed: 1.5 },
            duration: 20.0,
            imu_rate: 200.0,
            camera_rate: 10.0,
            match_rate: 1.0,
            cameras: 1,
            landmarks_per_meter: 8.0,
            landmark_min_range: 3.0,
            landmark_max_range: 15.0,
            max_track_range: 25.0,
            max_tracks_per_camera: 40,
            maps: 1,
            map_coverage: 1.0,
            keyframe_spacing: 1.0,
            max_correspondences_per_camera: 40,
            sigma_px: 1.0,
            outlier_rate: 0.5,
            imu_noise: ImuNoise::default(),
            seed: 0,
        }
    }
}

/// Pixel of a world landmark tracked in one camera image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub feature: u32,
    pub camera: usize,
    pub pixel: Vector2<f64>,
}

/// One synchronized rig capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub t: f64,
    pub tracks: Vec<TrackObservation>,
}

/// Correspondences between one rig capture and one map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchFrame {
    pub t: f64,
    /// Index into [`Scenario::frames`].
    pub frame: usize,
    pub map: u32,
    pub correspondences: Vec<Correspondence<f64>>,
}

/// The same physical point stored in two maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossMapAssociation {
    pub map_a: u32,
    pub landmark_a: u32,
    pub map_b: u32,
    pub landmark_b: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub config: SimConfig,
    pub rig: Vec<CameraModel<f64>>,
    /// Ground truth at every IMU sample.
    pub truth: Vec<TruthSample>,
    /// Corrupted IMU stream.
    pub imu: Vec<ImuSample<f64>>,
    pub frames: Vec<CameraFrame>,
    pub matches: Vec<MatchFrame>,
    #[serde(serialize_with = "maps_to_text", deserialize_with = "maps_from_text")]
    pub maps: Vec<MapBundle<f64>>,
    /// True `map_t_local` per map id.
    pub map_t_local: BTreeMap<u32, RigidTransform<f64>>,
    pub cross_map: Vec<CrossMapAssociation>,
    /// World (= local frame) landmark positions, indexed by feature id.
    pub landmarks: Vec<Vector3<f64>>,
}

fn maps_to_text<S: Serializer>(maps: &[MapBundle<f64>], s: S) -> Result<S::Ok, S::Error> {
    maps.iter().map(|m| m.to_text()).collect::<Vec<_>>().serialize(s)
}

fn maps_from_text<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<MapBundle<f64>>, D::Error> {
    let texts = Vec::<String>::deserialize(d)?;
    texts.iter().map(|t| MapBundle::from_text(t).map_err(serde::de::Error::custom)).collect()
}

impl Scenario {
    pub fn to_json(&self) -> Result<String, SimError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != SCENARIO_VERSION {
            return Err(SimError::Version(version));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn map(&self, id: u32) -> Option<&MapBundle<f64>> {
        self.maps.iter().find(|m| m.id() == id)
    }

    /// Ground truth at the IMU sample closest to `t`.
    pub fn truth_at(&self, t: f64) -> &TruthSample {
        let i = self.truth.partition_point(|s| s.t < t);
        match (i.checked_sub(1), self.truth.get(i)) {
            (Some(j), Some(s)) if (t - self.truth[j].t) < (s.t - t) => &self.truth[j],
            (_, Some(s)) => s,
            (Some(j), None) => &self.truth[j],
            (None, None) => panic!("scenario has no ground truth"),
        }
    }

    /// Length of the ground-truth path in meters.
    pub fn path_length(&self) -> f64 {
        self.truth.windows(2).map(|w| (w[1].pose.translation - w[0].pose.translation).norm()).sum()
    }
}

fn random_map_transform(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
    let pi = std::f64::consts::PI;
    RigidTransform::new(
        Rotation::from_yaw(rng.random_range(-pi..pi)),
        Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-2.0..2.0)),
    )
}

/// Landmarks scattered on both sides of the path at `[min_range, max_range]` lateral
/// distance and heights in `[−1, 4]` m.
fn scatter_landmarks(truth: &[TruthSample], cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    let mut carry = 0.0;
    let mut last = truth[0].pose.translation;
    let emit = |rng: &mut ChaCha8Rng, sample: &TruthSample, out: &mut Vec<Vector3<f64>>| {
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let range = rng.random_range(cfg.landmark_min_range..cfg.landmark_max_range);
        let base = sample.pose.translation;
        out.push(Vector3::new(base.x + range * angle.cos(), base.y + range * angle.sin(), rng.random_range(-1.0..4.0)));
    };
    for (i, s) in truth.iter().enumerate() {
        let step = (s.pose.translation - last).norm();
        last = s.pose.translation;
        carry += step * cfg.landmarks_per_meter;
        if i == 0 {
            carry = 0.0;
            let initial = if matches!(cfg.trajectory, TrajectoryKind::Static) {
                40.0f64.max(cfg.landmarks_per_meter)
            } else {
                0.0
            };
            for _ in 0..initial as usize {
                emit(rng, s, &mut out);
            }
        }
        while carry >= 1.0 {
            carry -= 1.0;
            emit(rng, s, &mut out);
        }
    }
    out
}

/// Builds a scenario from `cfg`.
pub fn generate_scenario(cfg: &SimConfig) -> Result<Scenario, SimError> {
    if !(cfg.camera_rate > 0.0 && cfg.match_rate > 0.0 && cfg.match_rate <= cfg.camera_rate) {
        return Err(SimError::InvalidParameter("need 0 < match_rate <= camera_rate".into()));
    }
    if !(cfg.map_coverage > 0.0 && cfg.map_coverage <= 1.0) || !(cfg.keyframe_spacing > 0.0) {
        return Err(SimError::InvalidParameter("map coverage must lie in (0, 1], keyframe spacing be positive".into()));
    }
    let rig = standard_rig(cfg.cameras)?;
    let (truth, exact_imu) = generate_trajectory(&cfg.trajectory, cfg.duration, cfg.imu_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let imu = corrupt_imu(&exact_imu, &cfg.imu_noise, rng.random())?;
    let landmarks = scatter_landmarks(&truth, cfg, &mut rng);

    // Camera frames on the IMU clock.
    let imu_per_frame = (cfg.imu_rate / cfg.camera_rate).round().max(1.0) as usize;
    let frames_per_match = (cfg.camera_rate / cfg.match_rate).round().max(1.0) as usize;
    let frame_samples: Vec<usize> = (0..truth.len()).step_by(imu_per_frame).collect();

    let mut frames = Vec::with_capacity(frame_samples.len());
    for &i in &frame_samples {
        let pose = truth[i].pose;
        let mut tracks = Vec::new();
        for cam in &rig {
            let cam_t_world = (pose * cam.imu_t_cam).inverse();
            let mut seen: Vec<(u32, Vector2<f64>, f64)> = landmarks
                .iter()
                .enumerate()
                .filter_map(|(id, p)| {
                    let pc = cam_t_world.transform_point(p);
                    if pc.norm() > cfg.max_track_range {
                        return None;
                    }
                    let px = cam.intrinsics.project(&pc)?;
                    cam.intrinsics.contains(&px).then_some((id as u32, px, pc.norm()))
                })
                .collect();
            // Keep the nearest landmarks; ties broken by id for determinism.
            seen.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
            seen.truncate(cfg.max_tracks_per_camera);
            seen.sort_by_key(|s| s.0);
            for (feature, px, _) in seen {
                tracks.push(TrackObservation {
                    feature,
                    camera: cam.id,
                    pixel: noisy_pixel(&mut rng, &cam.intrinsics, &px, cfg.sigma_px),
                });
            }
        }
        frames.push(CameraFrame { t: truth[i].t, tracks });
    }

    // Maps over disjoint time segments.
    let mut maps = Vec::with_capacity(cfg.maps);
    let mut map_t_local = BTreeMap::new();
    let mut map_landmarks: Vec<BTreeMap<u32, u32>> = Vec::with_capacity(cfg.maps);
    let segment = cfg.duration / cfg.maps.max(1) as f64;
    for m in 0..cfg.maps {
        let id = m as u32 + 1;
        let g_t_l = random_map_transform(&mut rng);
        let t0 = m as f64 * segment;
        let t1 = t0 + segment * cfg.map_coverage;
        let mut keyframe_times = Vec::new();
        let mut travelled = f64::INFINITY;
        let mut last = None::<Vector3<f64>>;
        for s in truth.iter().filter(|s| s.t >= t0 && s.t <= t1) {
            if let Some(l) = last {
                travelled += (s.pose.translation - l).norm();
            }
            last = Some(s.pose.translation);
            if travelled >= cfg.keyframe_spacing {
                keyframe_times.push(*s);
                travelled = 0.0;
            }
        }
        let mut keyframes = Vec::new();
        let mut observers: BTreeMap<u32, Vec<(u32, Vector2<f64>)>> = BTreeMap::new();
        for s in &keyframe_times {
            for cam in &rig {
                let kf_id = keyframes.len() as u32;
                let world_t_cam = s.pose * cam.imu_t_cam;
                let cam_t_world = world_t_cam.inverse();
                let mut obs = Vec::new();
                for (lid, p) in landmarks.iter().enumerate() {
                    let pc = cam_t_world.transform_point(p);
                    if pc.norm() > cfg.max_track_range {
                        continue;
                    }
                    if let Some(px) = cam.intrinsics.project(&pc).filter(|px| cam.intrinsics.contains(px)) {
                        let noisy = noisy_pixel(&mut rng, &cam.intrinsics, &px, cfg.sigma_px);
                        observers.entry(lid as u32).or_default().push((kf_id, noisy));
                        obs.push((lid as u32, noisy));
                    }
                }
                keyframes.push((kf_id, g_t_l * world_t_cam, obs));
            }
        }
        // Map-local landmark ids are consecutive in world-id order.
        let local_ids: BTreeMap<u32, u32> = observers.keys().enumerate().map(|(i, &w)| (w, i as u32)).collect();
        let bundle_keyframes = keyframes
            .into_iter()
            .map(|(kf_id, pose, obs)| MapKeyframe {
                id: kf_id,
                pose,
                observations: obs
                    .into_iter()
                    .map(|(w, pixel)| KeyframeObservation { landmark: local_ids[&w], pixel })
                    .collect(),
            })
            .collect();
        let bundle_landmarks = observers
            .iter()
            .map(|(w, obs)| Landmark {
                id: local_ids[w],
                position: g_t_l.transform_point(&landmarks[*w as usize]),
                observers: obs.iter().map(|o| o.0).collect(),
            })
            .collect();
        maps.push(MapBundle::new(id, rig[0].intrinsics, bundle_keyframes, bundle_landmarks)?);
        map_t_local.insert(id, g_t_l);
        map_landmarks.push(local_ids);
    }

    let mut cross_map = Vec::new();
    for a in 0..map_landmarks.len() {
        for b in a + 1..map_landmarks.len() {
            for (w, &la) in &map_landmarks[a] {
                if let Some(&lb) = map_landmarks[b].get(w) {
                    cross_map.push(CrossMapAssociation {
                        map_a: a as u32 + 1,
                        landmark_a: la,
                        map_b: b as u32 + 1,
                        landmark_b: lb,
                    });
                }
            }
        }
    }

    let noise = CorrespondenceNoise { outlier_rate: cfg.outlier_rate, sigma_px: cfg.sigma_px };
    let mut matches = Vec::new();
    for (f, &i) in frame_samples.iter().enumerate().step_by(frames_per_match) {
        for map in &maps {
            let g_t_l = map_t_local[&map.id()];
            let map_t_imu = g_t_l * truth[i].pose;
            let points: Vec<(u32, Vector3<f64>)> = map.landmarks().iter().map(|l| (l.id, l.position)).collect();
            let corrs = generate_correspondences(
                map.id(),
                &points,
                &rig,
                &map_t_imu,
                &noise,
                cfg.max_correspondences_per_camera,
                &mut rng,
            )?;
            if !corrs.is_empty() {
                matches.push(MatchFrame { t: truth[i].t, frame: f, map: map.id(), correspondences: corrs });
            }
        }
    }

    Ok(Scenario {
        version: SCENARIO_VERSION,
        config: cfg.clone(),
        rig,
        truth,
        imu,
        frames,
        matches,
        maps,
        map_t_local,
        cross_map,
        landmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{integrate_stream, NavState};
    use approx::assert_relative_eq;

    fn round_trip_error(kind: TrajectoryKind) -> f64 {
        let (truth, imu) = generate_trajectory(&kind, 10.0, 200.0).unwrap();
        let start = NavState {
            rotation: truth[0].pose.rotation,
            velocity: truth[0].velocity,
            position: truth[0].pose.translation,
        };
        integrate_stream(start, &imu)
            .iter()
            .zip(&truth)
            .map(|(s, t)| (s.position - t.pose.translation).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn static_imu_is_gravity_only() {
        let (_, imu) = generate_trajectory(&TrajectoryKind::Static, 1.0, 100.0).unwrap();
        for s in &imu {
            assert_eq!(s.gyro, Vector3::zeros());
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-15);
        }
    }

    #[test]
    fn line_has_no_rotation_rate() {
        let (truth, imu) = generate_trajectory(&TrajectoryKind::Line { speed: 2.0 }, 1.0, 100.0).unwrap();
        assert!(imu.iter().all(|s| s.gyro == Vector3::zeros() && s.accel == Vector3::new(0.0, 0.0, 9.81)));
        assert_relative_eq!(truth.last().unwrap().pose.translation.x, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let kind = TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.5 };
        let (_, imu) = generate_trajectory(&kind, 2.0, 50.0).unwrap();
        for s in &imu {
            // Forward-left-up body: the centripetal acceleration points left.
            assert_relative_eq!(s.accel, Vector3::new(0.0, 1.25, 9.81), epsilon = 1e-12);
            assert_relative_eq!(s.gyro.z, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn exact_imu_reproduces_trajectories() {
        for kind in ["static", "line", "circle", "figure_eight"] {
            let err = round_trip_error(kind.parse().unwrap());
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    #[test]
    fn unknown_trajectory_kind() {
        assert!(matches!("spiral".parse::<TrajectoryKind>(), Err(SimError::UnknownTrajectory(_))));
    }

    #[test]
    fn imu_corruption_is_seeded() {
        let (_, imu) = generate_trajectory(&TrajectoryKind::Line { speed: 1.0 }, 1.0, 100.0).unwrap();
        assert_eq!(corrupt_imu(&imu, &ImuNoise::zero(), 3).unwrap(), imu);
        let a = corrupt_imu(&imu, &ImuNoise::default(), 3).unwrap();
        let b = corrupt_imu(&imu, &ImuNoise::default(), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn white_noise_variance() {
        let (_, imu) = generate_trajectory(&TrajectoryKind::Static, 499.995, 200.0).unwrap();
        assert_eq!(imu.len(), 100_000);
        let noise = ImuNoise { gyro_noise: 0.01, accel_noise: 0.1, ..ImuNoise::zero() };
        let out = corrupt_imu(&imu, &noise, 7).unwrap();
        let n = out.len() as f64;
        let var_g = out.iter().map(|s| s.gyro.x * s.gyro.x).sum::<f64>() / n;
        let var_a = out.iter().map(|s| (s.accel.y).powi(2)).sum::<f64>() / n;
        assert!((var_g / 1e-4 - 1.0).abs() < 0.05, "{var_g}");
        assert!((var_a / 1e-2 - 1.0).abs() < 0.05, "{var_a}");
    }

    fn field() -> (Vec<(u32, Vector3<f64>)>, Vec<CameraModel<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = (0..400)
            .map(|i| {
                (
                    i,
                    Vector3::new(
                        rng.random_range(3.0..30.0),
                        rng.random_range(-15.0..15.0),
                        rng.random_range(-3.0..3.0),
                    ),
                )
            })
            .collect();
        (pts, standard_rig(1).unwrap())
    }

    #[test]
    fn noiseless_inliers_reproject_exactly() {
        let (pts, rig) = field();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = RigidTransform::identity();
        let noise = CorrespondenceNoise { outlier_rate: 0.0, sigma_px: 0.0 };
        let corrs = generate_correspondences(1, &pts, &rig, &pose, &noise, 1000, &mut rng).unwrap();
        assert!(!corrs.is_empty());
        for c in &corrs {
            assert!(c.inlier);
            let px = rig[0].project_world(&pose, &c.point).unwrap();
            assert_eq!(px, c.pixel);
        }
    }

    #[test]
    fn outlier_fraction_within_binomial_tolerance() {
        let (pts, rig) = field();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = CorrespondenceNoise { outlier_rate: 0.8, sigma_px: 1.0 };
        let corrs =
            generate_correspondences(1, &pts, &rig, &RigidTransform::identity(), &noise, 100, &mut rng).unwrap();
        assert_eq!(corrs.len(), 100);
        let outliers = corrs.iter().filter(|c| !c.inlier).count();
        assert!((70..=90).contains(&outliers), "{outliers}");
        for c in corrs.iter().filter(|c| c.inlier) {
            let px = rig[0].project_world(&RigidTransform::identity(), &c.point).unwrap();
            assert!((px - c.pixel).norm() <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn landmarks_behind_camera_never_inliers() {
        let pts = vec![(0, Vector3::new(-5.0, 0.0, 0.0)), (1, Vector3::new(5.0, 0.0, 0.0))];
        let rig = standard_rig(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = CorrespondenceNoise { outlier_rate: 0.0, sigma_px: 1.0 };
        let corrs = generate_correspondences(1, &pts, &rig, &RigidTransform::identity(), &noise, 10, &mut rng).unwrap();
        assert_eq!(corrs.len(), 1);
        assert_eq!(corrs[0].landmark, 1);
    }

    #[test]
    fn query_case_truth_is_consistent() {
        let case = query_case(&QueryCaseConfig { sigma_px: 0.0, cameras: 4, ..QueryCaseConfig::default() }).unwrap();
        assert_eq!(case.inlier_count(), 50);
        let frame = case.frame();
        let truth = case.truth();
        for (i, c) in case.correspondences.iter().enumerate().filter(|(_, c)| c.inlier) {
            let o = frame.observation(i, c).unwrap();
            assert!(o.reprojection_error(&truth).unwrap() < 1e-9);
        }
    }

    #[test]
    fn scenario_serialization_is_deterministic() {
        let cfg = SimConfig { duration: 4.0, maps: 2, cameras: 2, ..SimConfig::default() };
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        let ja = a.to_json().unwrap();
        assert!(ja == b.to_json().unwrap());
        let back = Scenario::from_json(&ja).unwrap();
        let jb = back.to_json().unwrap();
        let diverge = ja.bytes().zip(jb.bytes()).position(|(x, y)| x != y);
        assert!(
            diverge.is_none() && ja.len() == jb.len(),
            "round trip differs near {:?}",
            diverge.map(|i| &ja[i.saturating_sub(80)..(i + 80).min(ja.len())])
        );
        assert_eq!(back.maps.len(), 2);
        assert!(!back.matches.is_empty());
    }

    #[test]
    fn scenario_inliers_are_self_consistent() {
        let cfg = SimConfig { duration: 6.0, maps: 2, ..SimConfig::default() };
        let sc = generate_scenario(&cfg).unwrap();
        for m in &sc.matches {
            let truth = sc.truth_at(m.t);
            let map_t_imu = sc.map_t_local[&m.map] * truth.pose;
            for c in m.correspondences.iter().filter(|c| c.inlier) {
                let px = sc.rig[c.camera].project_world(&map_t_imu, &c.point).unwrap();
                assert!((px - c.pixel).norm() <= 3.0 * cfg.sigma_px + 1e-9);
            }
        }
    }
}
