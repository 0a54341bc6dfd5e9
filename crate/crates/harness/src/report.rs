//! Sweeps, summaries and the on-disk experiment layout.
//!
//! An output directory holds
//!
//! - `config.toml`: the configuration with all defaults filled in,
//! - `runs.jsonl`: one [`RunReport`] per line, in sweep order,
//! - `poses/<label>.csv`: the pose log of every run,
//! - `summary.csv`: mean and spread per sweep cell,
//! - `timing.csv`: wall-clock figures, kept apart because they vary between invocations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vilo_core::filter::PoseRecord;

use crate::config::{ExperimentConfig, Mode, RunSpec};
use crate::pipeline::{run_single, RunArtifacts, RunReport, RunStatus};

/// Mean and population standard deviation; `None` when empty.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Aggregates over the seeds of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub inlier_rate: f64,
    pub sigma_px: f64,
    pub cameras: usize,
    pub mode: Mode,
    pub runs: usize,
    pub failed: usize,
    pub local_error: Option<(f64, f64)>,
    pub map_error: Option<(f64, f64)>,
    pub tracking_error: Option<(f64, f64)>,
    /// Fraction of registration attempts that succeeded.
    pub registration_success: Option<f64>,
    pub registration_recall: Option<f64>,
    pub registration_translation_error: Option<f64>,
    pub matching_inlier_ratio: Option<f64>,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "inlier_rate,sigma_px,cameras,mode,runs,failed,local_mean,local_std,map_mean,map_std,tracking_mean,tracking_std,registration_success,registration_recall,registration_translation_error,matching_inlier_ratio";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let pair = |v: Option<(f64, f64)>| format!("{},{}", opt(v.map(|p| p.0)), opt(v.map(|p| p.1)));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.inlier_rate,
            self.sigma_px,
            self.cameras,
            self.mode,
            self.runs,
            self.failed,
            pair(self.local_error),
            pair(self.map_error),
            pair(self.tracking_error),
            opt(self.registration_success),
            opt(self.registration_recall),
            opt(self.registration_translation_error),
            opt(self.matching_inlier_ratio),
        )
    }
}

fn summarize(runs: &[&RunReport]) -> SummaryRow {
    let spec = runs[0].spec;
    let ok: Vec<_> = runs.iter().filter(|r| r.status == RunStatus::Ok).filter_map(|r| r.metrics.as_ref()).collect();
    let regs: Vec<_> = runs.iter().flat_map(|r| &r.registrations).collect();
    let accepted: Vec<_> = regs.iter().filter(|r| r.accepted).collect();
    let avg = |v: Vec<f64>| mean_std(&v).map(|p| p.0);
    SummaryRow {
        inlier_rate: spec.inlier_rate,
        sigma_px: spec.sigma_px,
        cameras: spec.cameras,
        mode: spec.mode,
        runs: runs.len(),
        failed: runs.len() - ok.len(),
        local_error: mean_std(&ok.iter().map(|m| m.local_error).collect::<Vec<_>>()),
        map_error: mean_std(&ok.iter().filter_map(|m| m.map_error).collect::<Vec<_>>()),
        tracking_error: mean_std(&ok.iter().map(|m| m.mean_error).collect::<Vec<_>>()),
        registration_success: (!regs.is_empty()).then(|| accepted.len() as f64 / regs.len() as f64),
        registration_recall: avg(accepted.iter().map(|r| r.recall).collect()),
        registration_translation_error: avg(accepted.iter().map(|r| r.translation_error).collect()),
        matching_inlier_ratio: avg(runs
            .iter()
            .filter(|r| r.matching.attempts > 0)
            .map(|r| r.matching.mean_inlier_ratio)
            .collect()),
    }
}

/// Summary rows in first-appearance order of the sweep cells.
pub fn summary_rows(runs: &[RunReport]) -> Vec<SummaryRow> {
    let key = |s: &RunSpec| (s.inlier_rate.to_bits(), s.sigma_px.to_bits(), s.cameras, s.mode);
    let mut keys = Vec::new();
    for r in runs {
        if !keys.contains(&key(&r.spec)) {
            keys.push(key(&r.spec));
        }
    }
    keys.iter().map(|k| summarize(&runs.iter().filter(|r| key(&r.spec) == *k).collect::<Vec<_>>())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunArtifacts>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn failures(&self) -> impl Iterator<Item = (&str, &str)> {
        self.runs.iter().filter_map(|r| match &r.report.status {
            RunStatus::Failed { reason } => Some((r.report.label.as_str(), reason.as_str())),
            RunStatus::Ok => None,
        })
    }

    pub fn runs_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.runs {
            s.push_str(&serde_json::to_string(&r.report).expect("reports serialize"));
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{}\n", SummaryRow::CSV_HEADER);
        for row in &self.summary {
            let _ = writeln!(s, "{}", row.to_csv());
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("label,total_s,initializer_s,frames\n");
        for r in &self.runs {
            let t = &r.timing;
            let _ = writeln!(s, "{},{},{},{}", r.report.label, t.total_s, t.initializer_s, t.frames);
        }
        s
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:>5} {:>5} {:>3} {:>7} {:>4} {:>4} {:>16} {:>16} {:>8}\n",
            "w", "σ_px", "cam", "mode", "runs", "fail", "local [m]", "map [m]", "reg.ok"
        );
        let pair = |v: Option<(f64, f64)>| v.map_or_else(|| "-".to_string(), |(m, sd)| format!("{m:.3} ± {sd:.3}"));
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:>3} {:>7} {:>4} {:>4} {:>16} {:>16} {:>8}",
                r.inlier_rate,
                r.sigma_px,
                r.cameras,
                r.mode.to_string(),
                r.runs,
                r.failed,
                pair(r.local_error),
                pair(r.map_error),
                r.registration_success.map_or_else(|| "-".into(), |v| format!("{v:.2}")),
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir.join("poses"))?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        fs::write(dir.join("runs.jsonl"), self.runs_jsonl())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("timing.csv"), self.timing_csv())?;
        for r in &self.runs {
            fs::write(dir.join("poses").join(format!("{}.csv", r.report.label)), pose_log(&r.poses))?;
        }
        Ok(())
    }
}

/// The CSV pose log of a run.
pub fn pose_log(records: &[PoseRecord]) -> String {
    let mut s = format!("{}\n", PoseRecord::CSV_HEADER);
    for r in records {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Runs every entry of the sweep. A failed run is recorded and the sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<ExperimentReport> {
    cfg.validate()?;
    let specs = cfg.runs();
    let runs: Vec<RunArtifacts> = if cfg.parallel {
        specs.par_iter().map(|s| run_single(cfg, s)).collect()
    } else {
        specs.iter().map(|s| run_single(cfg, s)).collect()
    };
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(ExperimentReport { config: cfg.clone(), summary: summary_rows(&reports), runs })
}
