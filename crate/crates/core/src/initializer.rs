//! Deterministic 4DoF initialization by consensus maximization.
//!
//! 1. Every correspondence pair yields a translation-invariant yaw constraint
//!    `d(α) = d1 sin α + d2 cos α + d3` with a noise bound ([`build_tims`]).
//! 2. Yaw is the point of a fine grid over `[−π, π]` satisfying the most constraints,
//!    found by branch and bound over coarse cells ([`vote_yaw`]). The result is the same as
//!    evaluating every grid point ([`vote_yaw_exhaustive`]).
//! 3. With yaw fixed, each correspondence confines the translation to a cone; the largest
//!    set of pairwise intersecting cones is an exact maximum clique ([`solve_translation`]).
//! 4. The pose is polished on the clique by Gauss-Newton on pixel residuals.
//!
//! No step draws random numbers, so repeated calls give bit-identical results.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Rotation, YawPose};
use crate::scalar::Real;
use crate::solvers::{refine_yaw_pose, Observation, PairSystem, YawConstraint};

/// Fine grid points per coarse yaw cell.
pub const FINE_SUBDIVISION: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("no usable yaw constraints")]
    NoConstraints,
    #[error("consensus of {found} correspondences is below the floor of {required}")]
    ConsensusTooSmall { found: usize, required: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig<T: Real> {
    /// Coarse yaw cell width in radians.
    pub yaw_step: T,
    /// Pixel noise standard deviation.
    pub sigma_px: T,
    /// Multiple of the angular noise used for bounds (noise is assumed truncated there).
    pub bound_scale: T,
    /// Assumed worst-case yaw error of the voting stage, widening translation cones.
    pub yaw_tolerance: T,
    /// Depth interval used to clamp estimated depths and bound the cones.
    pub min_depth: T,
    pub max_depth: T,
    /// Reprojection error below which a correspondence counts as an inlier of the
    /// polished pose.
    pub inlier_threshold_px: T,
    pub min_inliers: usize,
    pub polish_iterations: usize,
}

impl<T: Real> Default for InitConfig<T> {
    fn default() -> Self {
        Self {
            yaw_step: T::lit(0.25f64.to_radians()),
            sigma_px: T::one(),
            bound_scale: T::lit(3.0),
            yaw_tolerance: T::lit(1.0f64.to_radians()),
            min_depth: T::lit(0.1),
            max_depth: T::lit(200.0),
            inlier_threshold_px: T::lit(6.0),
            min_inliers: 3,
            polish_iterations: 20,
        }
    }
}

impl<T: Real> InitConfig<T> {
    fn validate(&self) -> Result<(), InitError> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.yaw_step) || self.yaw_step > T::pi() {
            return Err(InitError::InvalidConfig("yaw step must lie in (0, π]".into()));
        }
        if !(self.sigma_px >= T::zero()) || !positive(self.bound_scale) || !(self.yaw_tolerance >= T::zero()) {
            return Err(InitError::InvalidConfig("noise parameters must be non-negative".into()));
        }
        if !positive(self.inlier_threshold_px) {
            return Err(InitError::InvalidConfig("inlier threshold must be positive".into()));
        }
        if !positive(self.min_depth) || !(self.max_depth > self.min_depth) {
            return Err(InitError::InvalidConfig("depth range must satisfy 0 < min < max".into()));
        }
        Ok(())
    }

    /// Maximum angle between measured and true bearing of `o`.
    fn angular_bound(&self, o: &Observation<T>) -> T {
        self.bound_scale * self.sigma_px / o.intrinsics.min_focal()
    }
}

/// Translation-invariant yaw constraint of one correspondence pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimConstraint<T: Real> {
    /// Positions of the two observations in the slice the constraints were built from.
    pub pair: (usize, usize),
    pub constraint: YawConstraint<T>,
    /// `|d(α*)|` never exceeds this for two inliers at the true yaw.
    pub bound: T,
}

impl<T: Real> TimConstraint<T> {
    /// Whether the constraint votes for the grid point `alpha` of a grid with spacing `h`.
    fn holds_on_grid(&self, sin: T, cos: T, half_spacing: T) -> bool {
        let d = self.constraint.d1 * sin + self.constraint.d2 * cos + self.constraint.d3;
        d.abs() <= self.bound + self.constraint.amplitude() * half_spacing
    }
}

/// Builds one constraint per correspondence pair. Pairs whose rays are parallel or whose
/// map points coincide carry no yaw information and are skipped.
pub fn build_tims<T: Real>(obs: &[Observation<T>], cfg: &InitConfig<T>) -> Vec<TimConstraint<T>> {
    let mut out = Vec::with_capacity(obs.len() * obs.len().saturating_sub(1) / 2);
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            if let Some(t) = build_tim(&obs[i], &obs[j], (i, j), cfg) {
                out.push(t);
            }
        }
    }
    out
}

fn build_tim<T: Real>(
    oi: &Observation<T>,
    oj: &Observation<T>,
    pair: (usize, usize),
    cfg: &InitConfig<T>,
) -> Option<TimConstraint<T>> {
    let scale = T::one() + oi.point.norm().max(oj.point.norm());
    if (oi.point - oj.point).norm() <= T::lit(1e-9) * scale {
        return None;
    }
    let sys = PairSystem::new(oi, oj);
    if !sys.is_translation_observable() {
        return None;
    }
    let constraint = sys.yaw_constraint();
    let rho = constraint.amplitude();
    // Distances to both points, taken at every root (or at the closest approach to a
    // root when noise removed them) and kept at their largest.
    let mut angles = constraint.roots();
    if angles.is_empty() && rho > T::zero() {
        let phi = constraint.d2.atan2(constraint.d1);
        let target = if constraint.d3 > T::zero() { -T::frac_pi_2() } else { T::frac_pi_2() };
        angles.push(target - phi);
    }
    let (mut range_i, mut range_j) = (cfg.min_depth, cfg.min_depth);
    for alpha in angles {
        if let Some(t) = sys.translation(alpha) {
            let pose = YawPose::new(alpha, t);
            range_i = range_i.max((pose.transform_point(&oi.point) - oi.center).norm());
            range_j = range_j.max((pose.transform_point(&oj.point) - oj.center).norm());
        }
    }
    let range_i = range_i.min(cfg.max_depth);
    let range_j = range_j.min(cfg.max_depth);
    let ni = sys.null[0].hypot(sys.null[1]);
    let nj = sys.null[2].hypot(sys.null[3]);
    let bound = cfg.angular_bound(oi) * range_i * ni + cfg.angular_bound(oj) * range_j * nj;
    Some(TimConstraint { pair, constraint, bound: bound.max(T::lit(1e-12)) })
}

/// Result of the yaw voting stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawVote<T: Real> {
    pub alpha: T,
    pub consensus: usize,
}

struct FineGrid<T: Real> {
    spacing: T,
    half_count: i64,
}

impl<T: Real> FineGrid<T> {
    fn new(step: T) -> Self {
        let spacing = step / T::lit(FINE_SUBDIVISION as f64);
        let half_count = (T::pi() / spacing).floor().as_f64() as i64;
        Self { spacing, half_count }
    }

    fn angle(&self, m: i64) -> T {
        T::lit(m as f64) * self.spacing
    }

    fn indices(&self) -> std::ops::RangeInclusive<i64> {
        -self.half_count..=self.half_count
    }

    /// Whether `(count, m)` beats `(best_count, best_m)`: more votes, then smaller `|α|`,
    /// then positive over negative.
    fn better(count: usize, m: i64, best: Option<(usize, i64)>) -> bool {
        match best {
            None => true,
            Some((bc, bm)) => count > bc || (count == bc && (m.abs() < bm.abs() || (m.abs() == bm.abs() && m > bm))),
        }
    }
}

fn count_at<T: Real>(tims: &[&TimConstraint<T>], alpha: T, half_spacing: T) -> usize {
    let (s, c) = alpha.sin_cos();
    tims.iter().filter(|t| t.holds_on_grid(s, c, half_spacing)).count()
}

/// Maximizes the number of satisfied constraints over the fine grid of spacing
/// `step / FINE_SUBDIVISION`, by branch and bound over cells of width `step`.
pub fn vote_yaw<T: Real>(tims: &[TimConstraint<T>], step: T) -> Result<YawVote<T>, InitError> {
    if tims.is_empty() {
        return Err(InitError::NoConstraints);
    }
    if !(step > T::zero()) {
        return Err(InitError::InvalidConfig("yaw step must be positive".into()));
    }
    let grid = FineGrid::new(step);
    let half = grid.spacing * T::lit(0.5);
    let first = -grid.half_count;
    let cell_count = ((2 * grid.half_count + 1) as usize).div_ceil(FINE_SUBDIVISION);
    let cell_range = |c: usize| {
        let lo = first + (c * FINE_SUBDIVISION) as i64;
        let hi = (lo + FINE_SUBDIVISION as i64 - 1).min(grid.half_count);
        (lo, hi)
    };

    let mut bounds: Vec<(usize, usize)> = (0..cell_count)
        .map(|c| {
            let (lo, hi) = cell_range(c);
            let center = (grid.angle(lo) + grid.angle(hi)) * T::lit(0.5);
            let radius = grid.spacing * T::lit((hi - lo) as f64 * 0.5);
            (cell_upper_bound(tims, center, radius + half).len(), c)
        })
        .collect();
    bounds.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut best: Option<(usize, i64)> = None;
    for &(ub, c) in &bounds {
        if best.is_some_and(|(bc, _)| ub < bc) {
            break;
        }
        let (lo, hi) = cell_range(c);
        let center = (grid.angle(lo) + grid.angle(hi)) * T::lit(0.5);
        let radius = grid.spacing * T::lit((hi - lo) as f64 * 0.5);
        let candidates = cell_upper_bound(tims, center, radius + half);
        for m in lo..=hi {
            let count = count_at(&candidates, grid.angle(m), half);
            if FineGrid::<T>::better(count, m, best) {
                best = Some((count, m));
            }
        }
    }
    let (consensus, m) = best.expect("at least one cell");
    Ok(YawVote { alpha: grid.angle(m), consensus })
}

/// Constraints that may hold somewhere within `radius` of `center`.
fn cell_upper_bound<T: Real>(tims: &[TimConstraint<T>], center: T, radius: T) -> Vec<&TimConstraint<T>> {
    let (s, c) = center.sin_cos();
    tims.iter()
        .filter(|t| {
            let d = t.constraint.d1 * s + t.constraint.d2 * c + t.constraint.d3;
            d.abs() <= t.bound + t.constraint.amplitude() * radius
        })
        .collect()
}

/// Reference implementation of [`vote_yaw`] that evaluates every fine grid point.
pub fn vote_yaw_exhaustive<T: Real>(tims: &[TimConstraint<T>], step: T) -> Result<YawVote<T>, InitError> {
    if tims.is_empty() {
        return Err(InitError::NoConstraints);
    }
    let grid = FineGrid::new(step);
    let half = grid.spacing * T::lit(0.5);
    let all: Vec<_> = tims.iter().collect();
    let mut best = None;
    for m in grid.indices() {
        let count = count_at(&all, grid.angle(m), half);
        if FineGrid::<T>::better(count, m, best) {
            best = Some((count, m));
        }
    }
    let (consensus, m) = best.expect("grid is non-empty");
    Ok(YawVote { alpha: grid.angle(m), consensus })
}

/// Midpoint of the run of grid points around `vote` that share its consensus.
///
/// With bounded noise the maximum is attained on an interval containing the true yaw; its
/// midpoint is a better estimate than the tie-broken end point.
pub fn plateau_center<T: Real>(tims: &[TimConstraint<T>], vote: &YawVote<T>, step: T) -> T {
    let grid = FineGrid::new(step);
    let half = grid.spacing * T::lit(0.5);
    let m0 = (vote.alpha / grid.spacing).round().as_f64() as i64;
    let near: Vec<_> = tims.iter().collect();
    let holds = |m: i64| count_at(&near, grid.angle(m), half) >= vote.consensus;
    let mut lo = m0;
    while lo > -grid.half_count && holds(lo - 1) {
        lo -= 1;
    }
    let mut hi = m0;
    while hi < grid.half_count && holds(hi + 1) {
        hi += 1;
    }
    (grid.angle(lo) + grid.angle(hi)) * T::lit(0.5)
}

/// Positions of observations that take part in at least one constraint holding at the
/// voted yaw, ascending.
pub fn yaw_inliers<T: Real>(tims: &[TimConstraint<T>], vote: &YawVote<T>, step: T, count: usize) -> Vec<usize> {
    let half = step / T::lit(FINE_SUBDIVISION as f64) * T::lit(0.5);
    let (s, c) = vote.alpha.sin_cos();
    let mut keep = vec![false; count];
    for t in tims.iter().filter(|t| t.holds_on_grid(s, c, half)) {
        keep[t.pair.0] = true;
        keep[t.pair.1] = true;
    }
    keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect()
}

/// Translation estimate with its supporting set.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationEstimate<T: Real> {
    pub translation: Vector3<T>,
    /// Positions into the observation slice, ascending.
    pub inliers: Vec<usize>,
}

/// Whether the viewing cones of two observations intersect for yaw `alpha`.
///
/// Cone `i` holds the translations placing the rotated map point within the angular bound
/// of its ray: `t = c_i − R F_i + s b_i + δ` with `|δ| ≤ s tan θ_i`. Two cones are
/// compatible when some `s, u ∈ [0, max_depth]` bring the axis points within the sum of
/// radii, plus `slack` for the yaw error.
fn cones_compatible<T: Real>(
    oi: &Observation<T>,
    oj: &Observation<T>,
    rotation: &Matrix3<T>,
    cfg: &InitConfig<T>,
) -> bool {
    let apex_i = oi.center - rotation * oi.point;
    let apex_j = oj.center - rotation * oj.point;
    let tan_i = cfg.angular_bound(oi).tan();
    let tan_j = cfg.angular_bound(oj).tan();
    let diff = oi.point - oj.point;
    let slack = cfg.yaw_tolerance * diff.x.hypot(diff.y);
    let p = apex_i - apex_j;
    let max_depth = cfg.max_depth;
    let bi = oi.bearing;
    let bj = oj.bearing;
    let tau = tan_j / (T::one() - tan_j * tan_j).sqrt();

    // For fixed s the optimal u is closed form; the partial minimum is convex in s.
    let objective = |s: T| -> T {
        let q = p + bi * s;
        let m = q.dot(&bj);
        let r = (q.norm_squared() - m * m).max(T::zero()).sqrt();
        let u = (m + tau * r).max(T::zero()).min(max_depth);
        (q - bj * u).norm() - s * tan_i - u * tan_j
    };
    let mut lo = T::zero();
    let mut hi = max_depth;
    let ratio = T::lit(0.5 * (5f64.sqrt() - 1.0));
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    let mut best = objective(lo).min(objective(hi)).min(f1).min(f2);
    for _ in 0..80 {
        if best <= slack {
            return true;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = objective(x1);
            best = best.min(f1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = objective(x2);
            best = best.min(f2);
        }
        if hi - lo <= T::lit(1e-9) * (T::one() + max_depth) {
            break;
        }
    }
    best <= slack
}

/// Exact maximum clique by branch and bound with a greedy colouring bound.
///
/// Among maximum cliques the first one reached in the deterministic search order is
/// returned, sorted ascending.
pub fn maximum_clique(adjacency: &[Vec<bool>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut order: Vec<usize> = (0..n).collect();
    let degree: Vec<usize> = adjacency.iter().map(|row| row.iter().filter(|&&a| a).count()).collect();
    order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
    let mut best = Vec::new();
    let mut current = Vec::new();
    expand_clique(adjacency, &mut current, order, &mut best);
    best.sort_unstable();
    best
}

fn colour_sort(adjacency: &[Vec<bool>], candidates: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for &v in candidates {
        match classes.iter_mut().find(|class| class.iter().all(|&u| !adjacency[v][u])) {
            Some(class) => class.push(v),
            None => classes.push(vec![v]),
        }
    }
    let mut order = Vec::with_capacity(candidates.len());
    let mut colours = Vec::with_capacity(candidates.len());
    for (k, class) in classes.into_iter().enumerate() {
        for v in class {
            order.push(v);
            colours.push(k + 1);
        }
    }
    (order, colours)
}

fn expand_clique(adjacency: &[Vec<bool>], current: &mut Vec<usize>, candidates: Vec<usize>, best: &mut Vec<usize>) {
    let (order, colours) = colour_sort(adjacency, &candidates);
    for k in (0..order.len()).rev() {
        if current.len() + colours[k] <= best.len() {
            return;
        }
        let v = order[k];
        current.push(v);
        let next: Vec<usize> = order[..k].iter().copied().filter(|&u| adjacency[v][u]).collect();
        if next.is_empty() {
            if current.len() > best.len() {
                best.clone_from(current);
            }
        } else {
            expand_clique(adjacency, current, next, best);
        }
        current.pop();
    }
}

/// Least-squares translation placing every map point on its ray, for a fixed yaw.
pub fn least_squares_translation<T: Real>(obs: &[&Observation<T>], alpha: T) -> Vector3<T> {
    let rotation = Rotation::from_yaw(alpha).matrix();
    let mut lhs = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for o in obs {
        let proj = Matrix3::identity() - o.bearing * o.bearing.transpose();
        lhs += proj;
        rhs += proj * (o.center - rotation * o.point);
    }
    lhs.svd(true, true).solve(&rhs, T::lit(1e-12)).unwrap_or_else(|_| Vector3::zeros())
}

/// Translation by maximum clique over pairwise cone compatibility at yaw `alpha`.
pub fn solve_translation<T: Real>(
    obs: &[Observation<T>],
    alpha: T,
    cfg: &InitConfig<T>,
) -> Result<TranslationEstimate<T>, InitError> {
    if obs.is_empty() {
        return Err(InitError::InsufficientCorrespondences { needed: 1, got: 0 });
    }
    let adjacency = compatibility_graph(obs, alpha, cfg);
    let inliers = maximum_clique(&adjacency);
    let members: Vec<_> = inliers.iter().map(|&i| &obs[i]).collect();
    Ok(TranslationEstimate { translation: least_squares_translation(&members, alpha), inliers })
}

/// Pairwise cone compatibility at yaw `alpha`.
pub fn compatibility_graph<T: Real>(obs: &[Observation<T>], alpha: T, cfg: &InitConfig<T>) -> Vec<Vec<bool>> {
    let rotation = Rotation::from_yaw(alpha).matrix();
    let n = obs.len();
    let mut adjacency = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let ok = cones_compatible(&obs[i], &obs[j], &rotation, cfg);
            adjacency[i][j] = ok;
            adjacency[j][i] = ok;
        }
    }
    adjacency
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitResult<T: Real> {
    /// `q_t_map` from voting and the clique, before polishing.
    pub pose: YawPose<T>,
    /// Number of yaw constraints agreeing with the voted yaw.
    pub yaw_consensus: usize,
    /// Correspondence indices surviving yaw voting, ascending.
    pub yaw_inliers: Vec<usize>,
    /// Correspondence indices in the translation clique, ascending.
    pub translation_inliers: Vec<usize>,
    /// Pose after Gauss-Newton on the inliers.
    pub refined_pose: YawPose<T>,
    /// Correspondence indices reprojecting within the inlier threshold at `refined_pose`,
    /// ascending.
    pub inliers: Vec<usize>,
    pub wall_time: Duration,
}

fn within_threshold<T: Real>(o: &Observation<T>, pose: &YawPose<T>, threshold: T) -> bool {
    o.reprojection_error(pose).is_some_and(|e| e <= threshold)
}

/// Runs the full pipeline on observations expressed in a query frame.
pub fn initialize<T: Real>(obs: &[Observation<T>], cfg: &InitConfig<T>) -> Result<InitResult<T>, InitError> {
    let start = Instant::now();
    cfg.validate()?;
    if obs.len() < 2 {
        return Err(InitError::InsufficientCorrespondences { needed: 2, got: obs.len() });
    }
    let tims = build_tims(obs, cfg);
    let vote = vote_yaw(&tims, cfg.yaw_step)?;
    let yaw_positions = yaw_inliers(&tims, &vote, cfg.yaw_step, obs.len());
    let alpha = plateau_center(&tims, &vote, cfg.yaw_step);
    let filtered: Vec<_> = yaw_positions.iter().map(|&i| obs[i]).collect();
    let translation = solve_translation(&filtered, alpha, cfg)?;
    let floor = cfg.min_inliers.max(2);
    if translation.inliers.len() < floor {
        return Err(InitError::ConsensusTooSmall { found: translation.inliers.len(), required: floor });
    }
    let clique: Vec<_> = translation.inliers.iter().map(|&i| filtered[i]).collect();
    let pose = YawPose::new(alpha, translation.translation);
    let mut refined_pose = refine_yaw_pose(&clique, &pose, cfg.polish_iterations);

    // The cones were widened for the yaw error, so the clique may hold a few outliers.
    let trimmed: Vec<_> =
        clique.iter().copied().filter(|o| within_threshold(o, &refined_pose, cfg.inlier_threshold_px)).collect();
    if trimmed.len() >= floor && trimmed.len() < clique.len() {
        refined_pose = refine_yaw_pose(&trimmed, &pose, cfg.polish_iterations);
    }
    for _ in 0..2 {
        let support: Vec<_> =
            obs.iter().copied().filter(|o| within_threshold(o, &refined_pose, cfg.inlier_threshold_px)).collect();
        if support.len() < floor {
            break;
        }
        refined_pose = refine_yaw_pose(&support, &refined_pose, cfg.polish_iterations);
    }
    let mut inliers: Vec<usize> =
        obs.iter().filter(|o| within_threshold(o, &refined_pose, cfg.inlier_threshold_px)).map(|o| o.index).collect();
    inliers.sort_unstable();
    let mut translation_inliers: Vec<usize> = clique.iter().map(|o| o.index).collect();
    translation_inliers.sort_unstable();
    let mut yaw_inliers: Vec<usize> = filtered.iter().map(|o| o.index).collect();
    yaw_inliers.sort_unstable();
    Ok(InitResult {
        pose,
        yaw_consensus: vote.consensus,
        yaw_inliers,
        translation_inliers,
        refined_pose,
        inliers,
        wall_time: start.elapsed(),
    })
}
