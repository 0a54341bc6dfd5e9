//! Declarative experiment description, read from TOML.
//!
//! ```toml
//! name = "line-200m"
//! modes = ["local_only", "multi_map", { single_map = 1 }]
//!
//! [scenario]
//! trajectory = { kind = "line", speed = 1.5 }
//! duration = 133.0
//! maps = 2
//!
//! [sweep]
//! seeds = [1, 2, 3]
//! inlier_rates = [0.6, 0.7, 0.8]
//! ```
//!
//! Every field has a default except `sweep.seeds`, which must be listed explicitly. The
//! sweep's inlier rates, pixel noise levels and camera counts override the matching
//! scenario fields; each combination runs once per seed and mode.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vilo_core::filter::FilterConfig;
use vilo_core::sim::SimConfig;
use vilo_core::{InitConfig, RansacConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Which maps a run may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Visual-inertial odometry only.
    LocalOnly,
    /// Only the given map is matched against.
    SingleMap(u32),
    /// Every map in the scenario.
    MultiMap,
}

impl Mode {
    pub fn uses_map(&self, id: u32) -> bool {
        match self {
            Mode::LocalOnly => false,
            Mode::SingleMap(m) => *m == id,
            Mode::MultiMap => true,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::LocalOnly => write!(f, "local"),
            Mode::SingleMap(m) => write!(f, "map{m}"),
            Mode::MultiMap => write!(f, "multi"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" | "local_only" => Ok(Mode::LocalOnly),
            "multi" | "multi_map" => Ok(Mode::MultiMap),
            _ => s
                .strip_prefix("map")
                .and_then(|id| id.parse().ok())
                .map(Mode::SingleMap)
                .ok_or_else(|| format!("unknown mode `{s}` (expected local, multi or mapN)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub inlier_rates: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub cameras: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seeds: Vec::new(), inlier_rates: vec![0.5], sigmas: vec![1.0], cameras: vec![1] }
    }
}

/// Initializer knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSettings {
    /// Coarse yaw grid step, degrees.
    pub yaw_step_deg: f64,
    /// Pixel noise assumed by the consensus bounds.
    pub sigma_px: f64,
    pub bound_scale: f64,
    pub yaw_tolerance_deg: f64,
    pub inlier_threshold_px: f64,
    /// Registrations with fewer inliers are rejected and retried at the next match.
    pub min_inliers: usize,
}

impl Default for InitSettings {
    fn default() -> Self {
        let d = InitConfig::default();
        Self {
            yaw_step_deg: d.yaw_step.to_degrees(),
            sigma_px: d.sigma_px,
            bound_scale: d.bound_scale,
            yaw_tolerance_deg: d.yaw_tolerance.to_degrees(),
            inlier_threshold_px: d.inlier_threshold_px,
            min_inliers: 8,
        }
    }
}

impl InitSettings {
    pub fn to_config(&self) -> InitConfig {
        InitConfig {
            yaw_step: self.yaw_step_deg.to_radians(),
            sigma_px: self.sigma_px,
            bound_scale: self.bound_scale,
            yaw_tolerance: self.yaw_tolerance_deg.to_radians(),
            inlier_threshold_px: self.inlier_threshold_px,
            ..InitConfig::default()
        }
    }
}

/// Online matching (RANSAC) knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSettings {
    pub iterations: usize,
    pub threshold_px: f64,
    /// Matches with fewer inliers are not used for an update.
    pub min_inliers: usize,
    pub use_weights: bool,
    pub polish: bool,
}

impl Default for MatchSettings {
    fn default() -> Self {
        let d = RansacConfig::default();
        Self {
            iterations: d.iterations,
            threshold_px: d.threshold_px,
            min_inliers: d.min_inliers,
            use_weights: d.use_weights,
            polish: d.polish,
        }
    }
}

impl MatchSettings {
    pub fn to_config(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            iterations: self.iterations,
            threshold_px: self.threshold_px,
            min_inliers: self.min_inliers,
            use_weights: self.use_weights,
            seed,
            sample_size: 2,
            polish: self.polish,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub modes: Vec<Mode>,
    /// Run sweep entries on all cores.
    pub parallel: bool,
    pub output_dir: PathBuf,
    pub scenario: SimConfig,
    pub sweep: SweepConfig,
    pub filter: FilterConfig,
    pub initializer: InitSettings,
    pub matching: MatchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            modes: vec![Mode::MultiMap],
            parallel: true,
            output_dir: PathBuf::from("results"),
            scenario: SimConfig::default(),
            sweep: SweepConfig::default(),
            filter: FilterConfig::default(),
            initializer: InitSettings::default(),
            matching: MatchSettings::default(),
        }
    }
}

/// One entry of the expanded sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub inlier_rate: f64,
    pub sigma_px: f64,
    pub cameras: usize,
    pub mode: Mode,
}

impl RunSpec {
    pub fn label(&self) -> String {
        format!("s{}_w{}_px{}_c{}_{}", self.seed, self.inlier_rate, self.sigma_px, self.cameras, self.mode)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    /// The full configuration with every default filled in.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.into()));
        let s = &self.sweep;
        if s.seeds.is_empty() {
            return fail("sweep.seeds must list at least one seed");
        }
        if s.inlier_rates.is_empty() || s.sigmas.is_empty() || s.cameras.is_empty() || self.modes.is_empty() {
            return fail("sweep lists and modes must be non-empty");
        }
        if s.inlier_rates.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return fail("inlier rates must lie in (0, 1]");
        }
        if s.sigmas.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return fail("pixel noise levels must be non-negative");
        }
        if s.cameras.iter().any(|c| ![1, 2, 4].contains(c)) {
            return fail("camera counts must be 1, 2 or 4");
        }
        for mode in &self.modes {
            if let Mode::SingleMap(id) = mode {
                if *id == 0 || *id as usize > self.scenario.maps {
                    return Err(ConfigError::Invalid(format!("mode {mode} names a map the scenario lacks")));
                }
            }
        }
        self.filter.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Sweep entries ordered by seed, then inlier rate, noise, cameras and mode.
    pub fn runs(&self) -> Vec<RunSpec> {
        let s = &self.sweep;
        let mut out = Vec::new();
        for &seed in &s.seeds {
            for &inlier_rate in &s.inlier_rates {
                for &sigma_px in &s.sigmas {
                    for &cameras in &s.cameras {
                        for &mode in &self.modes {
                            out.push(RunSpec { seed, inlier_rate, sigma_px, cameras, mode });
                        }
                    }
                }
            }
        }
        out
    }

    /// Scenario parameters of one sweep entry.
    pub fn scenario_for(&self, spec: &RunSpec) -> SimConfig {
        SimConfig {
            seed: spec.seed,
            outlier_rate: 1.0 - spec.inlier_rate,
            sigma_px: spec.sigma_px,
            cameras: spec.cameras,
            ..self.scenario.clone()
        }
    }
}
