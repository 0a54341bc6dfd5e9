//! Solver-level Monte Carlo studies on synthetic single-query cases.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use vilo_core::initializer::{build_tims, compatibility_graph, initialize, maximum_clique, plateau_center, vote_yaw};
use vilo_core::metrics::alignment_error;
use vilo_core::sim::{query_case, QueryCase, QueryCaseConfig, SimError};
use vilo_core::solvers::{ransac_pose, ransac_success_probability};
use vilo_core::{InitConfig, RansacConfig, YawPose};

/// Pose tolerance separating a correct solution from a wrong one.
pub const SUCCESS_TRANSLATION_M: f64 = 0.05;
pub const SUCCESS_ROTATION_DEG: f64 = 0.5;

/// Translation and rotation error of a solved `q_t_map` against the case truth.
pub fn pose_error(case: &QueryCase, pose: &YawPose) -> (f64, f64) {
    let frame = case.frame();
    alignment_error(&frame.map_t_imu(pose), &frame.map_t_imu(&case.truth()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacStudy {
    pub inlier_rate: f64,
    pub sample_size: usize,
    pub iterations: usize,
    pub trials: usize,
    pub successes: usize,
    /// `1 − (1 − wⁿ)ᵏ`.
    pub predicted: f64,
}

impl RansacStudy {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Settings of [`ransac_study`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacStudyConfig {
    pub inlier_rate: f64,
    pub sample_size: usize,
    pub iterations: usize,
    pub trials: usize,
    /// Large enough that sampling without replacement is close to the independent model.
    pub correspondences: usize,
    pub sigma_px: f64,
    pub seed: u64,
}

impl Default for RansacStudyConfig {
    fn default() -> Self {
        Self {
            inlier_rate: 0.5,
            sample_size: 2,
            iterations: 10,
            trials: 1000,
            correspondences: 1000,
            sigma_px: 0.5,
            seed: 0,
        }
    }
}

/// Fraction of seeded trials in which uniform-sampling RANSAC, polished on its consensus
/// set, returns a pose within 0.5 m and 2° of the truth.
pub fn ransac_study(cfg: &RansacStudyConfig) -> Result<RansacStudy, SimError> {
    let mut successes = 0;
    for trial in 0..cfg.trials {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(trial as u64);
        let case = query_case(&QueryCaseConfig {
            correspondences: cfg.correspondences,
            inlier_rate: cfg.inlier_rate,
            sigma_px: cfg.sigma_px,
            seed,
            ..QueryCaseConfig::default()
        })?;
        let obs = case.frame().observations(&case.correspondences).expect("rig cameras");
        let ransac = RansacConfig {
            iterations: cfg.iterations,
            threshold_px: 3.0 * cfg.sigma_px.max(0.5),
            min_inliers: 2,
            use_weights: false,
            seed,
            sample_size: cfg.sample_size,
            polish: true,
        };
        if let Ok(result) = ransac_pose(&obs, &ransac) {
            let (t, r) = pose_error(&case, &result.pose);
            if t < 0.5 && r < 2f64.to_radians() {
                successes += 1;
            }
        }
    }
    Ok(RansacStudy {
        inlier_rate: cfg.inlier_rate,
        sample_size: cfg.sample_size,
        iterations: cfg.iterations,
        trials: cfg.trials,
        successes,
        predicted: ransac_success_probability(cfg.inlier_rate, cfg.sample_size as u32, cfg.iterations as u32),
    })
}

/// One deterministic-initializer case run repeatedly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitStudy {
    pub correspondences: usize,
    pub inlier_rate: f64,
    pub sigma_px: f64,
    pub cameras: usize,
    pub seed: u64,
    pub repeats: usize,
    /// Every repeat produced the same pose and inlier set, bit for bit.
    pub bit_identical: bool,
    pub translation_error: f64,
    pub rotation_error_deg: f64,
    /// Fraction of labelled inliers in the final inlier set.
    pub recall: f64,
    pub max_time: Duration,
    pub failure: Option<String>,
}

impl InitStudy {
    pub fn accurate(&self) -> bool {
        self.failure.is_none()
            && self.translation_error <= SUCCESS_TRANSLATION_M
            && self.rotation_error_deg <= SUCCESS_ROTATION_DEG
    }
}

pub fn init_config_for(sigma_px: f64) -> InitConfig {
    InitConfig { sigma_px, ..InitConfig::default() }
}

/// Runs the initializer `repeats` times on the case of `cfg`.
pub fn init_study(cfg: &QueryCaseConfig, repeats: usize) -> Result<InitStudy, SimError> {
    let case = query_case(cfg)?;
    let obs = case.frame().observations(&case.correspondences).expect("rig cameras");
    let init_cfg = init_config_for(cfg.sigma_px);
    let mut study = InitStudy {
        correspondences: cfg.correspondences,
        inlier_rate: cfg.inlier_rate,
        sigma_px: cfg.sigma_px,
        cameras: cfg.cameras,
        seed: cfg.seed,
        repeats,
        bit_identical: true,
        translation_error: f64::NAN,
        rotation_error_deg: f64::NAN,
        recall: 0.0,
        max_time: Duration::ZERO,
        failure: None,
    };
    let mut first: Option<(u64, [u64; 3], Vec<usize>)> = None;
    for _ in 0..repeats.max(1) {
        let r = match initialize(&obs, &init_cfg) {
            Ok(r) => r,
            Err(e) => {
                study.failure = Some(e.to_string());
                return Ok(study);
            }
        };
        study.max_time = study.max_time.max(r.wall_time);
        let p = r.refined_pose;
        let key = (
            p.yaw.to_bits(),
            [p.translation.x.to_bits(), p.translation.y.to_bits(), p.translation.z.to_bits()],
            r.inliers.clone(),
        );
        match &first {
            None => {
                let (t, rot) = pose_error(&case, &p);
                study.translation_error = t;
                study.rotation_error_deg = rot.to_degrees();
                let truth = case.correspondences.iter().filter(|c| c.inlier).count();
                let kept = r.inliers.iter().filter(|&&i| case.correspondences[i].inlier).count();
                study.recall = if truth == 0 { 1.0 } else { kept as f64 / truth as f64 };
                first = Some(key);
            }
            Some(f) => study.bit_identical &= *f == key,
        }
    }
    Ok(study)
}

/// Size of the largest clique by exhaustive subset enumeration (at most 25 vertices).
pub fn brute_force_clique_size(adjacency: &[Vec<bool>]) -> usize {
    let n = adjacency.len();
    assert!(n <= 25, "exhaustive search is limited to 25 vertices");
    let masks: Vec<u32> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && adjacency[i][j]).fold(0u32, |m, j| m | 1 << j)).collect();
    (1u32..1 << n)
        .filter(|&set| (0..n).filter(|&i| set >> i & 1 == 1).all(|i| set & !(1 << i) & !masks[i] == 0))
        .map(|set| set.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliqueCheck {
    pub vertices: usize,
    pub exact: usize,
    pub brute_force: usize,
    pub is_clique: bool,
}

impl CliqueCheck {
    pub fn agrees(&self) -> bool {
        self.is_clique && self.exact == self.brute_force
    }
}

/// Compares the exact clique search with exhaustive enumeration on the translation
/// compatibility graph the initializer builds for a case.
pub fn clique_check(cfg: &QueryCaseConfig) -> Result<Option<CliqueCheck>, SimError> {
    let case = query_case(cfg)?;
    let obs = case.frame().observations(&case.correspondences).expect("rig cameras");
    let init_cfg = init_config_for(cfg.sigma_px);
    let tims = build_tims(&obs, &init_cfg);
    let Ok(vote) = vote_yaw(&tims, init_cfg.yaw_step) else {
        return Ok(None);
    };
    let alpha = plateau_center(&tims, &vote, init_cfg.yaw_step);
    let adjacency = compatibility_graph(&obs, alpha, &init_cfg);
    let clique = maximum_clique(&adjacency);
    let is_clique = clique.iter().all(|&i| clique.iter().all(|&j| i == j || adjacency[i][j]));
    Ok(Some(CliqueCheck {
        vertices: adjacency.len(),
        exact: clique.len(),
        brute_force: brute_force_clique_size(&adjacency),
        is_clique,
    }))
}
