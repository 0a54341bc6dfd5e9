//! Causal evaluation metrics: mapping, matching, local-trajectory and map-trajectory errors.
//!
//! Trajectory files are plain text, one pose per line:
//!
//! ```text
//! # t x y z qx qy qz qw
//! 0.000 1.0 2.0 0.0 0.0 0.0 0.0 1.0
//! ```
//!
//! The quaternion follows the JPL convention used throughout the crate. Blank lines and
//! lines starting with `#` are ignored. Point clouds are whitespace-separated `x y z` lines
//! under the same comment rules.

use std::fmt::Write as _;
use std::path::Path;

use kiddo::{KdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::filter::PoseRecord;
use crate::geometry::{RigidTransform, Rotation};

/// Default timestamp association tolerance in seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonMonotone { index: usize },
    #[error("non-finite value at sample {index}")]
    NonFinite { index: usize },
    #[error("need at least {needed} associated samples, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("point configuration is degenerate (collinear or coincident)")]
    Degenerate,
    #[error("{estimated} estimated samples but only {associated} associate with ground truth")]
    LengthMismatch { estimated: usize, associated: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Time-stamped poses expressed in one named frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frame: String,
    samples: Vec<(f64, RigidTransform<f64>)>,
}

impl Trajectory {
    pub fn new(frame: impl Into<String>, samples: Vec<(f64, RigidTransform<f64>)>) -> Result<Self> {
        for (index, (t, pose)) in samples.iter().enumerate() {
            if !t.is_finite() || !pose.translation.iter().all(|v| v.is_finite()) {
                return Err(MetricsError::NonFinite { index });
            }
            if index > 0 && *t <= samples[index - 1].0 {
                return Err(MetricsError::NonMonotone { index });
            }
        }
        Ok(Self { frame: frame.into(), samples })
    }

    pub fn frame(&self) -> &str {
        &self.frame
    }

    pub fn samples(&self) -> &[(f64, RigidTransform<f64>)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.samples.iter().map(|(_, p)| p.translation).collect()
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &RigidTransform<f64>, frame: impl Into<String>) -> Self {
        Self { frame: frame.into(), samples: self.samples.iter().map(|(ts, p)| (*ts, t.compose(p))).collect() }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# frame {}\n# t x y z qx qy qz qw\n", self.frame);
        for (t, pose) in &self.samples {
            let p = &pose.translation;
            let q = pose.rotation.to_jpl();
            let _ = writeln!(s, "{} {} {} {} {} {} {} {}", t, p.x, p.y, p.z, q[0], q[1], q[2], q[3]);
        }
        s
    }

    /// Parses [`Trajectory::to_text`] output. A `# frame NAME` comment sets the frame name,
    /// otherwise `default_frame` is used.
    pub fn from_text(text: &str, default_frame: &str) -> Result<Self> {
        let mut frame = default_frame.to_string();
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(name) = comment.trim().strip_prefix("frame ") {
                    frame = name.trim().to_string();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let v = parse_floats(line, 8, i + 1)?;
            let rotation = Rotation::from_jpl([v[4], v[5], v[6], v[7]])
                .ok_or_else(|| MetricsError::Parse { line: i + 1, message: "invalid quaternion".into() })?;
            samples.push((v[0], RigidTransform::new(rotation, Vector3::new(v[1], v[2], v[3]))));
        }
        Self::new(frame, samples)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>, default_frame: &str) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, default_frame)
    }

    /// Extracts the poses logged for `map` (or the local frame when `None`) from filter
    /// pose records.
    pub fn from_pose_records(records: &[PoseRecord], map: Option<u32>) -> Result<Self> {
        let samples = records.iter().filter(|r| r.map == map).map(|r| (r.t, r.pose)).collect();
        Self::new(frame_name(map), samples)
    }

    /// Converts a filter pose log in CSV form (see [`PoseRecord::CSV_HEADER`]).
    pub fn from_pose_log(csv: &str, map: Option<u32>) -> Result<Self> {
        let wanted = map.map_or_else(|| "local".to_string(), |m| m.to_string());
        let mut samples = Vec::new();
        for (i, line) in csv.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line == PoseRecord::CSV_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 9 {
                return Err(MetricsError::Parse { line: i + 1, message: "too few columns".into() });
            }
            if fields[1] != wanted {
                continue;
            }
            let mut v = [0.0; 8];
            for (k, idx) in [0, 2, 3, 4, 5, 6, 7, 8].into_iter().enumerate() {
                v[k] = fields[idx].parse().map_err(|e| MetricsError::Parse { line: i + 1, message: format!("{e}") })?;
            }
            let rotation = Rotation::from_jpl([v[4], v[5], v[6], v[7]])
                .ok_or_else(|| MetricsError::Parse { line: i + 1, message: "invalid quaternion".into() })?;
            samples.push((v[0], RigidTransform::new(rotation, Vector3::new(v[1], v[2], v[3]))));
        }
        Self::new(frame_name(map), samples)
    }
}

fn frame_name(map: Option<u32>) -> String {
    map.map_or_else(|| "local".to_string(), |m| format!("map{m}"))
}

fn parse_floats(line: &str, count: usize, line_no: usize) -> Result<Vec<f64>> {
    let v = line
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| MetricsError::Parse { line: line_no, message: format!("{e}") })?;
    if v.len() != count {
        return Err(MetricsError::Parse {
            line: line_no,
            message: format!("expected {count} values, found {}", v.len()),
        });
    }
    Ok(v)
}

/// An unordered set of 3D points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if let Some(index) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(MetricsError::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform<f64>) -> Self {
        Self { points: self.points.iter().map(|p| t.transform_point(p)).collect() }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v = parse_floats(line, 3, i + 1)?;
            points.push(Vector3::new(v[0], v[1], v[2]));
        }
        Self::new(points)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Pairs each estimated sample with the nearest ground-truth sample within `tolerance`
/// seconds. Each ground-truth sample is used at most once; returns `(est, gt)` indices in
/// increasing order.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let gt_times: Vec<f64> = gt.samples.iter().map(|s| s.0).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, (t, _)) in est.samples.iter().enumerate() {
        let k = gt_times.partition_point(|g| g < t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt_times.len())
            .min_by(|&a, &b| (gt_times[a] - t).abs().total_cmp(&(gt_times[b] - t).abs()));
        if let Some(j) = best {
            let unused = pairs.last().is_none_or(|&(_, last)| j > last);
            if (gt_times[j] - t).abs() <= tolerance && unused {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Least-squares rigid transform `T` minimizing `Σ‖dst_i − T·src_i‖²` (no scale).
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform<f64>> {
    let n = src.len().min(dst.len());
    if n < 3 {
        return Err(MetricsError::TooFewPairs { needed: 3, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src[..n].iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst[..n].iter().sum::<Vector3<f64>>() * inv_n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - mu_s) * (d - mu_d).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= f64::EPSILON || sv[1] <= 1e-10 * sv[0] {
        return Err(MetricsError::Degenerate);
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rotation = Rotation::from_matrix(&r);
    let translation = mu_d - rotation.rotate(&mu_s);
    Ok(RigidTransform::new(rotation, translation))
}

/// Associated position pairs `(est, gt)`.
fn associated_positions(est: &Trajectory, gt: &Trajectory) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    associate(est, gt, ASSOCIATION_TOLERANCE)
        .into_iter()
        .map(|(i, j)| (est.samples[i].1.translation, gt.samples[j].1.translation))
        .unzip()
}

fn rmse<'a>(residuals: impl Iterator<Item = Vector3<f64>> + 'a) -> f64 {
    let (sum, n) = residuals.fold((0.0, 0usize), |(s, n), r| (s + r.norm_squared(), n + 1));
    (sum / n as f64).sqrt()
}

/// SE(3) transform taking `est` positions onto `gt` positions in the least-squares sense.
pub fn align_se3(est: &Trajectory, gt: &Trajectory) -> Result<RigidTransform<f64>> {
    let (e, g) = associated_positions(est, gt);
    fit_rigid(&e, &g)
}

/// Keyframe-position RMSE after least-squares SE(3) alignment.
pub fn mapping_keyframe_error(map_traj: &Trajectory, gt_traj: &Trajectory) -> Result<f64> {
    let (e, g) = associated_positions(map_traj, gt_traj);
    let t = fit_rigid(&e, &g)?;
    Ok(rmse(e.iter().zip(&g).map(|(e, g)| g - t.transform_point(e))))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the RMSE changes by less than this between iterations (meters).
    pub tolerance: f64,
    /// Nearest neighbours farther than this are not paired (meters).
    pub max_correspondence_distance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iterations: 50, tolerance: 1e-10, max_correspondence_distance: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointError {
    pub rmse: f64,
    pub pairs: usize,
    pub iterations: usize,
    /// `false` when the iteration limit was reached first; the other fields then hold the
    /// last iterate.
    pub converged: bool,
    /// Transform applied to the reconstruction.
    pub transform: RigidTransform<f64>,
}

/// Point-to-point ICP of `recon` onto `gt`, then nearest-neighbour RMSE over pairs within
/// the correspondence cap.
pub fn mapping_point_error(recon: &PointCloud, gt: &PointCloud, cfg: &IcpConfig) -> Result<PointError> {
    if recon.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let mut tree: KdTree<f64, 3> = KdTree::with_capacity(gt.len());
    for (i, p) in gt.points.iter().enumerate() {
        tree.add(&[p.x, p.y, p.z], i as u64);
    }
    let cap2 = cfg.max_correspondence_distance * cfg.max_correspondence_distance;
    let pairs_at = |t: &RigidTransform<f64>| -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        recon
            .points
            .iter()
            .filter_map(|p| {
                let q = t.transform_point(p);
                let nn = tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
                (nn.distance <= cap2).then(|| (*p, gt.points[nn.item as usize]))
            })
            .unzip()
    };
    let score = |t: &RigidTransform<f64>, src: &[Vector3<f64>], dst: &[Vector3<f64>]| {
        rmse(src.iter().zip(dst).map(|(s, d)| d - t.transform_point(s)))
    };

    let mut transform = RigidTransform::identity();
    let (mut src, mut dst) = pairs_at(&transform);
    if src.is_empty() {
        return Err(MetricsError::TooFewPairs { needed: 1, got: 0 });
    }
    let mut current = score(&transform, &src, &dst);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let Ok(next) = fit_rigid(&src, &dst) else {
            break;
        };
        let (s, d) = pairs_at(&next);
        if s.is_empty() {
            break;
        }
        let next_score = score(&next, &s, &d);
        if next_score >= current {
            converged = true;
            break;
        }
        let change = current - next_score;
        (transform, src, dst, current) = (next, s, d, next_score);
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(PointError { rmse: current, pairs: src.len(), iterations, converged, transform })
}

/// Translation distance and rotation angle (radians) between two transforms.
pub fn alignment_error(est: &RigidTransform<f64>, gt: &RigidTransform<f64>) -> (f64, f64) {
    let translation = (est.translation - gt.translation).norm();
    let m = est.rotation.matrix().transpose() * gt.rotation.matrix();
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = m - m.transpose();
    let sin = 0.5 * Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]).norm();
    (translation, sin.atan2(cos))
}

/// RMSE after aligning only the first associated pose, over the remaining samples.
pub fn local_trajectory_error(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewPairs { needed: 2, got: pairs.len() });
    }
    // Both trajectories expressed relative to their own first pose; equal to aligning the
    // first estimated pose onto the first ground-truth pose, up to a rotation of residuals.
    let (e0, g0) = (&est.samples[pairs[0].0].1, &gt.samples[pairs[0].1].1);
    let (re, rg) = (e0.rotation.inverse(), g0.rotation.inverse());
    Ok(rmse(pairs[1..].iter().map(|&(i, j)| {
        rg.rotate(&(gt.samples[j].1.translation - g0.translation))
            - re.rotate(&(est.samples[i].1.translation - e0.translation))
    })))
}

/// Plain positional RMSE of poses already expressed in the same map frame.
pub fn map_trajectory_error(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() != est.len() || pairs.is_empty() {
        return Err(MetricsError::LengthMismatch { estimated: est.len(), associated: pairs.len() });
    }
    Ok(rmse(pairs.iter().map(|&(i, j)| gt.samples[j].1.translation - est.samples[i].1.translation)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Trajectory {
        let samples = (0..n)
            .map(|i| {
                let s = i as f64;
                (
                    s * 0.1,
                    RigidTransform::new(Rotation::from_yaw(0.1 * s), Vector3::new(s.cos() * 3.0, s.sin(), 0.2 * s)),
                )
            })
            .collect();
        Trajectory::new("gt", samples).unwrap()
    }

    #[test]
    fn trajectory_rejects_unordered_timestamps() {
        let p = RigidTransform::identity();
        assert!(matches!(Trajectory::new("x", vec![(0.0, p), (0.0, p)]), Err(MetricsError::NonMonotone { index: 1 })));
    }

    #[test]
    fn association_respects_tolerance() {
        let gt = line(10);
        let shifted = Trajectory::new(
            "est",
            gt.samples().iter().map(|(t, p)| (t + 0.004, *p)).chain([(5.0, RigidTransform::identity())]).collect(),
        )
        .unwrap();
        let pairs = associate(&shifted, &gt, ASSOCIATION_TOLERANCE);
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|(i, j)| i == j));
    }

    #[test]
    fn text_round_trip() {
        let gt = line(7);
        let back = Trajectory::from_text(&gt.to_text(), "other").unwrap();
        assert_eq!(back.frame(), "gt");
        assert_eq!(back.len(), 7);
        for ((t0, a), (t1, b)) in gt.samples().iter().zip(back.samples()) {
            assert_eq!(t0, t1);
            assert_eq!(a.translation, b.translation);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-15);
        }
        let cloud = PointCloud::new(gt.positions()).unwrap();
        assert_eq!(PointCloud::from_text(&cloud.to_text()).unwrap(), cloud);
    }

    #[test]
    fn pose_log_conversion_selects_frame() {
        let pose = RigidTransform::new(Rotation::from_yaw(0.3), Vector3::new(1.0, 2.0, 3.0));
        let local = RigidTransform::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        let records = [
            PoseRecord { t: 0.1, map: None, pose: local, local_pose: local, covariance_trace: 1.0 },
            PoseRecord { t: 0.1, map: Some(4), pose, local_pose: local, covariance_trace: 1.0 },
        ];
        let mut csv = format!("{}\n", PoseRecord::CSV_HEADER);
        for r in &records {
            csv.push_str(&r.to_csv());
            csv.push('\n');
        }
        let map = Trajectory::from_pose_log(&csv, Some(4)).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.samples()[0].1.translation, pose.translation);
        assert_eq!(map, Trajectory::from_pose_records(&records, Some(4)).unwrap());
        let loc = Trajectory::from_pose_log(&csv, None).unwrap();
        assert_eq!(loc.samples()[0].1.translation, local.translation);
    }

    #[test]
    fn collinear_alignment_is_degenerate() {
        let samples =
            (0..5).map(|i| (i as f64, RigidTransform::from_translation(Vector3::new(i as f64, 0.0, 0.0)))).collect();
        let t = Trajectory::new("x", samples).unwrap();
        assert!(matches!(align_se3(&t, &t), Err(MetricsError::Degenerate)));
    }

    #[test]
    fn icp_reports_non_convergence() {
        let pts: Vec<_> = (0..200)
            .map(|i| {
                let s = i as f64;
                Vector3::new((s * 0.37).sin() * 4.0, (s * 0.11).cos() * 3.0, (s * 0.07).sin() * 2.0)
            })
            .collect();
        let gt = PointCloud::new(pts).unwrap();
        let moved = gt.transformed(&RigidTransform::new(Rotation::from_yaw(0.05), Vector3::new(0.2, -0.1, 0.05)));
        let cfg = IcpConfig { max_iterations: 1, tolerance: 0.0, ..IcpConfig::default() };
        let partial = mapping_point_error(&moved, &gt, &cfg).unwrap();
        assert!(!partial.converged);
        assert_eq!(partial.iterations, 1);
    }
}
