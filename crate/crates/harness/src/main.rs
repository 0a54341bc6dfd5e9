use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vilo_core::metrics::{self, IcpConfig, PointCloud, Trajectory};
use vilo_core::sim::{generate_scenario, Scenario};
use vilo_core::RigidTransform;
use vilo_harness::acceptance::{self, Outcome};
use vilo_harness::config::{ExperimentConfig, Mode, RunSpec};
use vilo_harness::pipeline::{run_loaded, PipelineSettings, RunStatus};
use vilo_harness::report::pose_log;
use vilo_harness::{compare_modes, run_experiment};

/// Multi-map visual-inertial localization experiments.
#[derive(Parser)]
#[command(name = "vilo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write it with its maps and ground truth.
    Simulate {
        /// Experiment config; its first sweep entry picks seed, inlier rate, noise and rig.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Determinism, accuracy and inlier recall of the initializer.
    InitBench {
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        /// Seeded instances per inlier rate in the recall study.
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// RANSAC success rates against the closed-form prediction, and 2- versus 3-point
    /// sampling.
    MatchBench {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Run an experiment sweep, or replay one saved scenario.
    Localize {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Saved scenario to replay instead of generating the sweep.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "multi")]
        mode: Mode,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute one metric from files.
    Evaluate {
        #[arg(long, value_enum)]
        metric: Metric,
        /// Trajectory file, filter pose log (CSV) or point cloud.
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Map whose poses to read from a pose log; the local frame when absent.
        #[arg(long)]
        map: Option<u32>,
    },
    /// Paired comparison of modes and rig sizes.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fraction of seeds on which each ordering must hold.
        #[arg(long, default_value_t = 0.8)]
        required: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Local,
    Map,
    Keyframe,
    Points,
}

fn load_trajectory(path: &PathBuf, map: Option<u32>) -> Result<Trajectory> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let traj = if text.starts_with(vilo_core::filter::PoseRecord::CSV_HEADER) {
        Trajectory::from_pose_log(&text, map)?
    } else {
        Trajectory::from_text(&text, &path.display().to_string())?
    };
    Ok(traj)
}

fn print_outcomes(outcomes: &[Outcome]) -> ExitCode {
    for o in outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn simulate(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            sweep: vilo_harness::config::SweepConfig { seeds: vec![0], ..Default::default() },
            ..Default::default()
        },
    };
    if let Some(seed) = seed {
        cfg.sweep.seeds = vec![seed];
    }
    let spec = cfg.runs()[0];
    let scenario = generate_scenario(&cfg.scenario_for(&spec))?;
    fs::create_dir_all(&out)?;
    scenario.save(out.join("scenario.json"))?;
    for map in &scenario.maps {
        map.save(out.join(format!("map{}.vilomap", map.id())))?;
    }
    let truth: Vec<_> = scenario.truth.iter().map(|s| (s.t, s.pose)).collect();
    let local = Trajectory::new("local", truth)?;
    local.save(out.join("truth_local.txt"))?;
    for (id, g) in &scenario.map_t_local {
        local.transformed(g, format!("map{id}")).save(out.join(format!("truth_map{id}.txt")))?;
    }
    println!(
        "{}: {:.1} m path, {} frames, {} maps, {} landmarks",
        out.display(),
        scenario.path_length(),
        scenario.frames.len(),
        scenario.maps.len(),
        scenario.landmarks.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn localize(config: Option<PathBuf>, scenario: Option<PathBuf>, mode: Mode, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = match &config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = scenario {
        let s = Scenario::load(&path)?;
        let spec = RunSpec {
            seed: s.config.seed,
            inlier_rate: 1.0 - s.config.outlier_rate,
            sigma_px: s.config.sigma_px,
            cameras: s.config.cameras,
            mode,
        };
        let run = run_loaded(&s, &PipelineSettings::from_experiment(&cfg), &spec);
        let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("poses.csv"), pose_log(&run.poses))?;
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run.report)?)?;
        println!("{}", serde_json::to_string_pretty(&run.report.metrics)?);
        return Ok(match run.report.status {
            RunStatus::Ok => ExitCode::SUCCESS,
            RunStatus::Failed { reason } => {
                eprintln!("run failed: {reason}");
                ExitCode::FAILURE
            }
        });
    }
    if config.is_none() {
        bail!("either --config or --scenario is required");
    }
    let report = run_experiment(&cfg)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    report.write(&dir)?;
    print!("{}", report.summary_table());
    let failures: Vec<_> = report.failures().collect();
    for (label, reason) in &failures {
        eprintln!("{label}: {reason}");
    }
    Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn evaluate(metric: Metric, est: PathBuf, gt: PathBuf, map: Option<u32>) -> Result<ExitCode> {
    match metric {
        Metric::Points => {
            let r =
                metrics::mapping_point_error(&PointCloud::load(&est)?, &PointCloud::load(&gt)?, &IcpConfig::default())?;
            println!(
                "rmse {} m over {} pairs ({} iterations, converged: {})",
                r.rmse, r.pairs, r.iterations, r.converged
            );
        }
        Metric::Local | Metric::Map | Metric::Keyframe => {
            let e = load_trajectory(&est, map)?;
            let g = load_trajectory(&gt, None)?;
            let value = match metric {
                Metric::Local => metrics::local_trajectory_error(&e, &g)?,
                Metric::Map => metrics::map_trajectory_error(&e, &g)?,
                _ => {
                    let t: RigidTransform = metrics::align_se3(&e, &g)?;
                    let (dt, dr) = metrics::alignment_error(&t, &RigidTransform::identity());
                    println!("alignment: {dt} m, {} deg", dr.to_degrees());
                    metrics::mapping_keyframe_error(&e, &g)?
                }
            };
            println!("rmse {value} m");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(config: PathBuf, out: Option<PathBuf>, required: f64) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let table = compare_modes(&cfg)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    table.report.write(&dir)?;
    let text = table.to_text();
    fs::write(dir.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(if table.orderings().iter().all(|o| o.holds(required)) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Simulate { config, seed, out } => simulate(config, seed, out),
        Command::InitBench { repeats, instances } => Ok(print_outcomes(&[
            acceptance::deterministic_initialization(repeats),
            acceptance::inlier_recall(instances),
        ])),
        Command::MatchBench { trials } => {
            Ok(print_outcomes(&[acceptance::ransac_success_rates(trials), acceptance::two_point_advantage(trials)]))
        }
        Command::Localize { config, scenario, mode, out } => localize(config, scenario, mode, out),
        Command::Evaluate { metric, est, gt, map } => evaluate(metric, est, gt, map),
        Command::Compare { config, out, required } => compare(config, out, required),
    }
}
