//! Paired-seed comparison of localization modes and rig sizes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::pipeline::RunStatus;
use crate::report::{mean_std, run_experiment, ExperimentReport};

/// Per-frame tracking error statistics of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub cameras: usize,
    /// Per seed, `None` for failed runs.
    pub per_seed: BTreeMap<u64, Option<RunSummary>>,
    /// Mean and standard deviation across seeds of the per-run mean error.
    pub mean: Option<(f64, f64)>,
    /// Mean across seeds of the per-run error standard deviation.
    pub mean_std: Option<f64>,
}

/// How often a paired ordering held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub description: String,
    pub held: usize,
    pub seeds: usize,
}

impl OrderingCheck {
    /// True when the ordering held on at least `fraction` of the seeds.
    pub fn holds(&self, fraction: f64) -> bool {
        self.seeds > 0 && self.held as f64 >= fraction * self.seeds as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub report: ExperimentReport,
}

impl ComparisonTable {
    pub fn row(&self, mode: Mode, cameras: usize) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.mode == mode && r.cameras == cameras)
    }

    /// Fused multi-map mean and spread no worse than the worse single map, per seed.
    pub fn multi_map_ordering(&self, cameras: usize) -> Option<OrderingCheck> {
        let fused = self.row(Mode::MultiMap, cameras)?;
        let singles: Vec<_> =
            self.rows.iter().filter(|r| r.cameras == cameras && matches!(r.mode, Mode::SingleMap(_))).collect();
        if singles.is_empty() {
            return None;
        }
        let mut held = 0;
        for (seed, f) in &fused.per_seed {
            let worst = singles.iter().map(|r| r.per_seed.get(seed).copied().flatten()).collect::<Option<Vec<_>>>();
            if let (Some(f), Some(worst)) = (f, worst) {
                let max_mean = worst.iter().map(|s| s.mean).fold(f64::MIN, f64::max);
                let max_std = worst.iter().map(|s| s.std).fold(f64::MIN, f64::max);
                if f.mean <= max_mean && f.std <= max_std {
                    held += 1;
                }
            }
        }
        Some(OrderingCheck {
            description: format!("{cameras}-camera fused ≤ worse single map (mean and std)"),
            held,
            seeds: fused.per_seed.len(),
        })
    }

    /// `more`-camera mean error below the `fewer`-camera one, per seed.
    pub fn camera_ordering(&self, mode: Mode, fewer: usize, more: usize) -> Option<OrderingCheck> {
        let a = self.row(mode, fewer)?;
        let b = self.row(mode, more)?;
        let held = a
            .per_seed
            .iter()
            .filter(|(seed, x)| match (x, b.per_seed.get(seed).copied().flatten()) {
                (Some(x), Some(y)) => y.mean < x.mean,
                _ => false,
            })
            .count();
        Some(OrderingCheck {
            description: format!("{mode}: {more}-camera mean < {fewer}-camera mean"),
            held,
            seeds: a.per_seed.len(),
        })
    }

    /// Every ordering the table supports.
    pub fn orderings(&self) -> Vec<OrderingCheck> {
        let mut cams: Vec<usize> = self.rows.iter().map(|r| r.cameras).collect();
        cams.sort_unstable();
        cams.dedup();
        let mut modes: Vec<Mode> = self.rows.iter().map(|r| r.mode).collect();
        modes.sort_unstable();
        modes.dedup();
        let mut out: Vec<_> = cams.iter().filter_map(|&c| self.multi_map_ordering(c)).collect();
        if let (Some(&lo), Some(&hi)) = (cams.first(), cams.last()) {
            if lo != hi {
                out.extend(
                    modes.iter().filter(|m| **m != Mode::LocalOnly).filter_map(|&m| self.camera_ordering(m, lo, hi)),
                );
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>7} {:>3} {:>18} {:>10}\n", "mode", "cam", "mean ± std [m]", "mean σ [m]");
        for r in &self.rows {
            let mean = r.mean.map_or_else(|| "-".into(), |(m, sd)| format!("{m:.4} ± {sd:.4}"));
            let sd = r.mean_std.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:>7} {:>3} {:>18} {:>10}", r.mode.to_string(), r.cameras, mean, sd);
        }
        for o in self.orderings() {
            let _ = writeln!(s, "{}: {}/{} seeds", o.description, o.held, o.seeds);
        }
        s
    }
}

/// Runs every configured mode and camera count on the same seeds and tabulates the
/// per-frame tracking error.
pub fn compare_modes(cfg: &ExperimentConfig) -> anyhow::Result<ComparisonTable> {
    let report = run_experiment(cfg)?;
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for run in &report.runs {
        let spec = run.report.spec;
        let summary = match (&run.report.status, &run.report.metrics) {
            (RunStatus::Ok, Some(m)) => Some(RunSummary { mean: m.mean_error, std: m.std_error }),
            _ => None,
        };
        match rows.iter_mut().find(|r| r.mode == spec.mode && r.cameras == spec.cameras) {
            Some(row) => {
                row.per_seed.insert(spec.seed, summary);
            }
            None => rows.push(ComparisonRow {
                mode: spec.mode,
                cameras: spec.cameras,
                per_seed: BTreeMap::from([(spec.seed, summary)]),
                mean: None,
                mean_std: None,
            }),
        }
    }
    for row in &mut rows {
        let ok: Vec<RunSummary> = row.per_seed.values().flatten().copied().collect();
        row.mean = mean_std(&ok.iter().map(|s| s.mean).collect::<Vec<_>>());
        row.mean_std = mean_std(&ok.iter().map(|s| s.std).collect::<Vec<_>>()).map(|p| p.0);
    }
    Ok(ComparisonTable { rows, report })
}
