//! End-to-end localization runs: simulator output through initialization, matching and
//! the filter, followed by evaluation against ground truth.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vilo_core::filter::{
    Diagnostics, Filter, FilterConfig, FilterError, ImuState, MapFeature, MapObservation, PoseRecord, Registration,
    UpdateStats,
};
use vilo_core::initializer::initialize;
use vilo_core::metrics::{self, MetricsError, Trajectory};
use vilo_core::sim::{generate_scenario, MatchFrame, Scenario, SimError};
use vilo_core::solvers::{match_correspondences, SolverError};
use vilo_core::{NavState, QueryFrame, RigidTransform};

use crate::config::{ExperimentConfig, InitSettings, MatchSettings, Mode, RunSpec};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario: {0}")]
    Scenario(#[from] SimError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("evaluation: {0}")]
    Metrics(#[from] MetricsError),
    #[error("scenario has no camera frames")]
    Empty,
    #[error("scenario has no map {0}")]
    UnknownMap(u32),
}

/// Settings shared by every run of an experiment.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelineSettings {
    pub filter: FilterConfig,
    pub initializer: InitSettings,
    pub matching: MatchSettings,
}

impl PipelineSettings {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self { filter: cfg.filter.clone(), initializer: cfg.initializer.clone(), matching: cfg.matching.clone() }
    }
}

/// Outcome of one registration attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationEvent {
    pub t: f64,
    pub map: u32,
    pub correspondences: usize,
    pub true_inliers: usize,
    pub inliers: usize,
    /// Fraction of the labelled inliers kept by the initializer.
    pub recall: f64,
    pub accepted: bool,
    /// Error of the initializer's pose against ground truth.
    pub translation_error: f64,
    pub rotation_error: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingStats {
    pub attempts: usize,
    /// Matches whose inliers were passed to the filter.
    pub used: usize,
    pub mean_inlier_ratio: f64,
    /// Mean fraction of RANSAC inliers that are labelled inliers.
    pub mean_precision: f64,
}

/// Everything the pipeline produced for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// Pose records after every camera frame.
    pub poses: Vec<PoseRecord>,
    pub registrations: Vec<RegistrationEvent>,
    pub matching: MatchingStats,
    pub local_updates: UpdateStats,
    pub map_updates: UpdateStats,
    pub diagnostics: Diagnostics,
    pub wall_time: Duration,
    pub initializer_time: Duration,
}

/// Hooks into [`run_pipeline_observed`] for inspecting the filter mid-run.
pub trait PipelineObserver {
    fn before_map_update(&mut self, _filter: &Filter) {}
    fn after_map_update(&mut self, _filter: &Filter) {}
    fn after_frame(&mut self, _filter: &Filter) {}
}

impl PipelineObserver for () {}

/// Drives the filter with the scenario's sensor streams, registering and matching against
/// the maps `mode` allows. Every output depends only on data up to its timestamp.
pub fn run_pipeline(s: &Scenario, settings: &PipelineSettings, mode: Mode) -> Result<PipelineOutput, RunError> {
    run_pipeline_observed(s, settings, mode, &mut ())
}

pub fn run_pipeline_observed(
    s: &Scenario,
    settings: &PipelineSettings,
    mode: Mode,
    observer: &mut impl PipelineObserver,
) -> Result<PipelineOutput, RunError> {
    let start = Instant::now();
    let first = s.truth.first().ok_or(RunError::Empty)?;
    let imu = ImuState::new(NavState {
        rotation: first.pose.rotation,
        velocity: first.velocity,
        position: first.pose.translation,
    });
    let mut filter = Filter::new(settings.filter.clone(), s.rig.clone(), imu, first.t)?;
    let init_cfg = settings.initializer.to_config();
    let cross: HashMap<(u32, u32), (u32, u32)> = s
        .cross_map
        .iter()
        .flat_map(|a| {
            [((a.map_a, a.landmark_a), (a.map_b, a.landmark_b)), ((a.map_b, a.landmark_b), (a.map_a, a.landmark_a))]
        })
        .collect();
    let mut matches_by_frame: BTreeMap<usize, Vec<&MatchFrame>> = BTreeMap::new();
    for m in s.matches.iter().filter(|m| mode.uses_map(m.map)) {
        matches_by_frame.entry(m.frame).or_default().push(m);
    }

    let mut out = PipelineOutput {
        poses: Vec::with_capacity(s.frames.len() * (1 + s.maps.len())),
        registrations: Vec::new(),
        matching: MatchingStats::default(),
        local_updates: UpdateStats::default(),
        map_updates: UpdateStats::default(),
        diagnostics: Diagnostics::default(),
        wall_time: Duration::ZERO,
        initializer_time: Duration::ZERO,
    };
    let mut ratio_sum = 0.0;
    let mut precision_sum = 0.0;
    let mut sample = 0;
    for (index, frame) in s.frames.iter().enumerate() {
        while sample < s.imu.len() && s.imu[sample].t <= frame.t + 1e-9 {
            filter.propagate(&s.imu[sample])?;
            sample += 1;
        }
        let tracks: Vec<_> = frame.tracks.iter().map(|t| (t.feature, t.camera, t.pixel)).collect();
        let (clone, stats) = filter.process_tracks(&tracks);
        out.local_updates += stats;

        for m in matches_by_frame.get(&index).into_iter().flatten() {
            let attitude = filter.state().imu.nav.rotation;
            let query = QueryFrame::new(&attitude, &s.rig, 0)?;
            if !filter.is_registered(m.map) {
                let timer = Instant::now();
                let event = register(&mut filter, s, m, &query, &init_cfg, settings.initializer.min_inliers);
                out.initializer_time += timer.elapsed();
                out.registrations.push(event);
                continue;
            }
            out.matching.attempts += 1;
            let ransac = settings.matching.to_config(m.frame as u64 ^ (u64::from(m.map) << 32));
            let Ok(result) = match_correspondences(&m.correspondences, &query, &ransac) else {
                continue;
            };
            ratio_sum += result.inlier_ratio;
            if !result.inliers.is_empty() {
                let good = result.inliers.iter().filter(|&&i| m.correspondences[i].inlier).count();
                precision_sum += good as f64 / result.inliers.len() as f64;
            }
            if result.inliers.len() < settings.matching.min_inliers {
                continue;
            }
            out.matching.used += 1;
            let features = result
                .inliers
                .iter()
                .map(|&i| {
                    let c = &m.correspondences[i];
                    MapFeature {
                        landmark: c.landmark,
                        camera: c.camera,
                        pixel: c.pixel,
                        cross: cross.get(&(m.map, c.landmark)).copied().filter(|(o, _)| mode.uses_map(*o)),
                    }
                })
                .collect();
            observer.before_map_update(&filter);
            out.map_updates += filter.update_map(&MapObservation { map: m.map, clone, features })?;
            observer.after_map_update(&filter);
        }
        observer.after_frame(&filter);
        out.poses.extend(filter.pose_records());
    }
    if out.matching.attempts > 0 {
        out.matching.mean_inlier_ratio = ratio_sum / out.matching.attempts as f64;
        out.matching.mean_precision = precision_sum / out.matching.attempts as f64;
    }
    out.diagnostics = *filter.diagnostics();
    out.wall_time = start.elapsed();
    Ok(out)
}

fn register(
    filter: &mut Filter,
    s: &Scenario,
    m: &MatchFrame,
    query: &QueryFrame,
    cfg: &vilo_core::InitConfig,
    min_inliers: usize,
) -> RegistrationEvent {
    let true_inliers = m.correspondences.iter().filter(|c| c.inlier).count();
    let mut event = RegistrationEvent {
        t: m.t,
        map: m.map,
        correspondences: m.correspondences.len(),
        true_inliers,
        inliers: 0,
        recall: 0.0,
        accepted: false,
        translation_error: f64::NAN,
        rotation_error: f64::NAN,
        failure: None,
    };
    let result = query
        .observations(&m.correspondences)
        .map_err(|e| e.to_string())
        .and_then(|obs| initialize(&obs, cfg).map(|r| (obs, r)).map_err(|e| e.to_string()));
    let (obs, init) = match result {
        Ok(v) => v,
        Err(e) => {
            event.failure = Some(e);
            return event;
        }
    };
    event.inliers = init.inliers.len();
    let kept = init.inliers.iter().filter(|&&i| m.correspondences[i].inlier).count();
    event.recall = if true_inliers == 0 { 1.0 } else { kept as f64 / true_inliers as f64 };
    let reg = Registration::from_init(query, &obs, &init, cfg.sigma_px);
    let truth = s.map_t_local[&m.map] * s.truth_at(m.t).pose;
    (event.translation_error, event.rotation_error) = metrics::alignment_error(&reg.map_t_imu, &truth);
    if init.inliers.len() < min_inliers {
        event.failure = Some(format!("{} inliers, need {min_inliers}", init.inliers.len()));
        return event;
    }
    let Some(map) = s.map(m.map) else {
        event.failure = Some(format!("scenario lacks map {}", m.map));
        return event;
    };
    match filter.register_map(map.clone(), &reg) {
        Ok(()) => event.accepted = true,
        Err(e) => event.failure = Some(e.to_string()),
    }
    event
}

/// Ground-truth trajectory matching the timestamps of `est`, in map `map` (or the local
/// frame when `None`).
pub fn truth_trajectory(s: &Scenario, est: &Trajectory, map: Option<u32>) -> Result<Trajectory, RunError> {
    let g =
        map.map_or(Ok(RigidTransform::identity()), |m| s.map_t_local.get(&m).copied().ok_or(RunError::UnknownMap(m)))?;
    let samples = est.samples().iter().map(|(t, _)| (*t, g * s.truth_at(*t).pose)).collect();
    Ok(Trajectory::new(est.frame(), samples)?)
}

/// Evaluation of one run against ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Local trajectory error (first-pose alignment only).
    pub local_error: f64,
    /// Position error of the last local pose.
    pub final_local_error: f64,
    /// Map trajectory error per registered map.
    pub map_errors: BTreeMap<u32, f64>,
    /// Root mean square of all map-frame position errors.
    pub map_error: Option<f64>,
    /// Mean and standard deviation of the per-frame tracking error: map-frame error averaged
    /// over registered maps, or local drift for frames without a registered map.
    pub mean_error: f64,
    pub std_error: f64,
    /// RMS tracking error per quarter of the run's duration.
    pub quarter_errors: [Option<f64>; 4],
    /// Frames with at least one registered map.
    pub localized_fraction: f64,
}

impl RunMetrics {
    /// Q4 over Q2 tracking error.
    pub fn growth(&self) -> Option<f64> {
        Some(self.quarter_errors[3]? / self.quarter_errors[1]?)
    }
}

pub fn evaluate(s: &Scenario, out: &PipelineOutput) -> Result<RunMetrics, RunError> {
    let local = Trajectory::from_pose_records(&out.poses, None)?;
    let local_gt = truth_trajectory(s, &local, None)?;
    let local_error = metrics::local_trajectory_error(&local, &local_gt)?;
    let (t_last, p_last) = local.samples().last().ok_or(RunError::Empty)?;
    let final_local_error = (p_last.translation - s.truth_at(*t_last).pose.translation).norm();

    let mut map_errors = BTreeMap::new();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    // Per frame time: sum of squared map-frame errors and number of maps.
    let mut per_frame: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    let maps: Vec<u32> =
        out.poses.iter().filter_map(|r| r.map).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for m in maps {
        let est = Trajectory::from_pose_records(&out.poses, Some(m))?;
        let gt = truth_trajectory(s, &est, Some(m))?;
        let e = metrics::map_trajectory_error(&est, &gt)?;
        map_errors.insert(m, e);
        sq_sum += e * e * est.len() as f64;
        count += est.len();
        for ((t, p), (_, g)) in est.samples().iter().zip(gt.samples()) {
            let entry = per_frame.entry(t.to_bits()).or_default();
            entry.0 += (p.translation - g.translation).norm();
            entry.1 += 1;
        }
    }

    let series: Vec<(f64, f64)> = local
        .samples()
        .iter()
        .zip(local_gt.samples())
        .map(|((t, p), (_, g))| match per_frame.get(&t.to_bits()) {
            Some((sum, n)) => (*t, sum / *n as f64),
            None => (*t, (p.translation - g.translation).norm()),
        })
        .collect();
    let n = series.len() as f64;
    let mean_error = series.iter().map(|(_, e)| e).sum::<f64>() / n;
    let std_error = (series.iter().map(|(_, e)| (e - mean_error).powi(2)).sum::<f64>() / n).sqrt();
    let (t0, t1) = (series[0].0, series[series.len() - 1].0);
    let span = (t1 - t0).max(f64::MIN_POSITIVE);
    let mut quarters = [(0.0, 0usize); 4];
    for (t, e) in &series {
        let q = (((t - t0) / span * 4.0) as usize).min(3);
        quarters[q].0 += e * e;
        quarters[q].1 += 1;
    }
    Ok(RunMetrics {
        local_error,
        final_local_error,
        map_errors,
        map_error: (count > 0).then(|| (sq_sum / count as f64).sqrt()),
        mean_error,
        std_error,
        quarter_errors: quarters.map(|(s, n)| (n > 0).then(|| (s / n as f64).sqrt())),
        localized_fraction: per_frame.len() as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { reason: String },
}

/// Per-run entry of an experiment report. Contains no timing, so reports of repeated
/// invocations compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub spec: RunSpec,
    pub status: RunStatus,
    pub path_length: f64,
    pub metrics: Option<RunMetrics>,
    pub registrations: Vec<RegistrationEvent>,
    pub matching: MatchingStats,
    pub local_updates: UpdateStats,
    pub map_updates: UpdateStats,
    pub max_null_space_residual: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_s: f64,
    pub initializer_s: f64,
    pub frames: usize,
}

/// A completed run with its pose log and timing.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub poses: Vec<PoseRecord>,
    pub timing: RunTiming,
}

/// Generates the scenario of `spec` and runs it. Failures are recorded in the report.
pub fn run_single(cfg: &ExperimentConfig, spec: &RunSpec) -> RunArtifacts {
    let settings = PipelineSettings::from_experiment(cfg);
    let mut report = RunReport {
        label: spec.label(),
        spec: *spec,
        status: RunStatus::Ok,
        path_length: 0.0,
        metrics: None,
        registrations: Vec::new(),
        matching: MatchingStats::default(),
        local_updates: UpdateStats::default(),
        map_updates: UpdateStats::default(),
        max_null_space_residual: 0.0,
    };
    let scenario = match generate_scenario(&cfg.scenario_for(spec)) {
        Ok(s) => s,
        Err(e) => {
            report.status = RunStatus::Failed { reason: RunError::from(e).to_string() };
            return RunArtifacts { report, poses: Vec::new(), timing: RunTiming::default() };
        }
    };
    run_scenario_with(&scenario, &settings, spec, report)
}

/// Runs an existing scenario, e.g. one loaded from disk.
pub fn run_loaded(scenario: &Scenario, settings: &PipelineSettings, spec: &RunSpec) -> RunArtifacts {
    let report = RunReport {
        label: spec.label(),
        spec: *spec,
        status: RunStatus::Ok,
        path_length: 0.0,
        metrics: None,
        registrations: Vec::new(),
        matching: MatchingStats::default(),
        local_updates: UpdateStats::default(),
        map_updates: UpdateStats::default(),
        max_null_space_residual: 0.0,
    };
    run_scenario_with(scenario, settings, spec, report)
}

fn run_scenario_with(s: &Scenario, settings: &PipelineSettings, spec: &RunSpec, mut report: RunReport) -> RunArtifacts {
    report.path_length = s.path_length();
    let out = match run_pipeline(s, settings, spec.mode) {
        Ok(o) => o,
        Err(e) => {
            report.status = RunStatus::Failed { reason: e.to_string() };
            return RunArtifacts { report, poses: Vec::new(), timing: RunTiming::default() };
        }
    };
    report.registrations = out.registrations.clone();
    report.matching = out.matching;
    report.local_updates = out.local_updates;
    report.map_updates = out.map_updates;
    report.max_null_space_residual = out.diagnostics.max_null_space_residual;
    match evaluate(s, &out) {
        Ok(m) => report.metrics = Some(m),
        Err(e) => report.status = RunStatus::Failed { reason: e.to_string() },
    }
    if spec.mode != Mode::LocalOnly && !out.registrations.iter().any(|r| r.accepted) && report.status == RunStatus::Ok {
        report.status = RunStatus::Failed { reason: "no map could be registered".into() };
    }
    let timing = RunTiming {
        total_s: out.wall_time.as_secs_f64(),
        initializer_s: out.initializer_time.as_secs_f64(),
        frames: s.frames.len(),
    };
    RunArtifacts { report, poses: out.poses, timing }
}

/// A copy of `s` holding only the first `fraction` of its camera frames and the sensor
/// data up to the last kept frame.
pub fn truncate_scenario(s: &Scenario, fraction: f64) -> Scenario {
    let keep = ((s.frames.len() as f64 * fraction).ceil() as usize).min(s.frames.len());
    let mut out = s.clone();
    out.frames.truncate(keep);
    let t_end = out.frames.last().map_or(f64::NEG_INFINITY, |f| f.t);
    out.imu.retain(|x| x.t <= t_end + 1e-9);
    out.truth.retain(|x| x.t <= t_end + 1e-9);
    out.matches.retain(|m| m.frame < keep);
    out
}
