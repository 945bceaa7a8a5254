//! Ablation grids and batch-size sweeps.
//!
//! Each cell is an independent run with its own config; cells may execute
//! on several worker threads and results are returned in job order, so the
//! output does not depend on the worker count.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use latentdr::latentdr::{AblationVariant, DegradationKind};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};
use crate::report::RunReport;
use crate::runner::run_experiment;

pub const GRID_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const SWEEP_BATCH_SIZES: [usize; 6] = [4, 8, 16, 32, 64, 100];

/// Runs every config, `workers` at a time, returning reports in input order.
pub fn run_configs(configs: &[ExperimentConfig], workers: usize) -> Result<Vec<RunReport>> {
    for cfg in configs {
        cfg.validate()?;
    }
    let workers = workers.clamp(1, configs.len().max(1));
    if workers == 1 {
        return configs.iter().map(run_experiment).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let result = run_experiment(&configs[i]);
                slots.lock().expect("no poisoned lock")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .map_err(|_| HarnessError::Worker)?
        .into_iter()
        .map(|slot| slot.unwrap_or(Err(HarnessError::Worker)))
        .collect()
}

/// Held-out domains the grid rotates over.
pub fn held_out_domains(base: &ExperimentConfig) -> Vec<usize> {
    match base.task {
        Task::Dg => (0..base.domains).collect(),
        Task::LongTail => vec![base.held_out],
    }
}

/// Sample-aware kind and Gaussian noise, each with D-only, R-only and D+R,
/// plus ERM, over [`GRID_SEEDS`] and every held-out domain.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let sample_aware = match base.kind {
        DegradationKind::Gaussian => DegradationKind::SelfAttention,
        k => k,
    };
    let mut cells = vec![(base.kind, AblationVariant::Erm)];
    for kind in [sample_aware, DegradationKind::Gaussian] {
        for variant in [AblationVariant::DOnly, AblationVariant::ROnly, AblationVariant::DPlusR] {
            cells.push((kind, variant));
        }
    }
    let mut out = Vec::new();
    for held_out in held_out_domains(base) {
        for seed in GRID_SEEDS {
            for &(kind, variant) in &cells {
                let mut cfg = base.clone();
                cfg.held_out = held_out;
                cfg.seed = seed;
                cfg.kind = kind;
                cfg.variant = variant;
                cfg.d_head = base.d_head;
                cfg.d_ff = base.d_ff;
                out.push(cfg);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self { mean, sd: var.sqrt(), n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub kind: String,
    pub variant: String,
    pub runs: usize,
    pub test_acc: Option<MeanSd>,
    pub clean_acc: Option<MeanSd>,
    pub degraded_acc: Option<MeanSd>,
    pub restored_acc: Option<MeanSd>,
    pub align_test: Option<MeanSd>,
    pub uniform_test: Option<MeanSd>,
    pub align_train: Option<MeanSd>,
    pub uniform_train: Option<MeanSd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub cells: Vec<SummaryCell>,
}

impl GridSummary {
    /// Groups reports by (kind label, variant), in order of first appearance.
    pub fn from_reports(reports: &[RunReport]) -> Self {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<&RunReport>> = BTreeMap::new();
        for r in reports {
            let key = (r.kind_label(), r.config.variant.to_string());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let cells = order
            .into_iter()
            .map(|key| {
                let rs = &groups[&key];
                let col = |f: &dyn Fn(&RunReport) -> Option<f64>| {
                    let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                    MeanSd::of(&v)
                };
                SummaryCell {
                    runs: rs.len(),
                    test_acc: col(&|r| Some(r.final_metrics.test_acc)),
                    clean_acc: col(&|r| Some(r.final_metrics.clean_acc)),
                    degraded_acc: col(&|r| Some(r.final_metrics.degraded_acc)),
                    restored_acc: col(&|r| Some(r.final_metrics.restored_acc)),
                    align_test: col(&|r| r.final_metrics.align_test),
                    uniform_test: col(&|r| r.final_metrics.uniform_test),
                    align_train: col(&|r| r.final_metrics.align_train),
                    uniform_train: col(&|r| r.final_metrics.uniform_train),
                    kind: key.0,
                    variant: key.1,
                }
            })
            .collect();
        Self { cells }
    }

    pub fn cell(&self, kind: &str, variant: AblationVariant) -> Option<&SummaryCell> {
        let v = variant.to_string();
        self.cells.iter().find(|c| c.kind == kind && c.variant == v)
    }

    /// Fixed-width text table of mean±sd per cell.
    pub fn table(&self) -> String {
        let fmt = |m: &Option<MeanSd>| m.map_or_else(|| "-".to_string(), |m| format!("{:.4}±{:.4}", m.mean, m.sd));
        let mut out = format!(
            "{:<9} {:<9} {:>5} {:>16} {:>16} {:>16} {:>16} {:>16}\n",
            "kind", "variant", "runs", "test_acc", "degraded_acc", "restored_acc", "align_test", "uniform_test"
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{:<9} {:<9} {:>5} {:>16} {:>16} {:>16} {:>16} {:>16}\n",
                c.kind,
                c.variant,
                c.runs,
                fmt(&c.test_acc),
                fmt(&c.degraded_acc),
                fmt(&c.restored_acc),
                fmt(&c.align_test),
                fmt(&c.uniform_test)
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub summary: GridSummary,
    pub reports: Vec<RunReport>,
}

pub fn run_ablation_grid(base: &ExperimentConfig, workers: usize) -> Result<GridResult> {
    let reports = run_configs(&ablation_configs(base), workers)?;
    Ok(GridResult {
        summary: GridSummary::from_reports(&reports),
        reports,
    })
}

/// Same base config (and seeds) at each per-domain batch size.
pub fn sweep_configs(base: &ExperimentConfig, sizes: &[usize], seeds: &[u64]) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for &b in sizes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.batch_size = b;
            cfg.seed = seed;
            out.push(cfg);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub batch_size: usize,
    pub test_acc: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub reports: Vec<RunReport>,
}

pub fn batch_size_sweep(base: &ExperimentConfig, sizes: &[usize], seeds: &[u64], workers: usize) -> Result<SweepResult> {
    let reports = run_configs(&sweep_configs(base, sizes, seeds), workers)?;
    let points = sizes
        .iter()
        .map(|&b| {
            let accs: Vec<f64> = reports
                .iter()
                .filter(|r| r.config.batch_size == b)
                .map(|r| r.final_metrics.test_acc)
                .collect();
            SweepPoint {
                batch_size: b,
                test_acc: MeanSd::of(&accs).expect("at least one seed per size"),
            }
        })
        .collect();
    Ok(SweepResult { points, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size() {
        let base = ExperimentConfig::dg();
        let cfgs = ablation_configs(&base);
        assert_eq!(cfgs.len(), (2 * 3 + 1) * 5 * 4);
        let erm = cfgs.iter().filter(|c| c.variant == AblationVariant::Erm).count();
        assert_eq!(erm, 5 * 4);
        let gauss = cfgs.iter().filter(|c| c.kind == DegradationKind::Gaussian).count();
        assert_eq!(gauss, 3 * 5 * 4);
    }

    #[test]
    fn sweep_only_varies_batch() {
        let base = ExperimentConfig::dg();
        let cfgs = sweep_configs(&base, &SWEEP_BATCH_SIZES, &[7]);
        assert_eq!(cfgs.len(), 6);
        for c in &cfgs {
            let mut same = c.clone();
            same.batch_size = base.batch_size;
            same.seed = base.seed;
            assert_eq!(same, base);
            assert_eq!(c.seed, 7);
        }
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.sd, m.n), (2.0, 1.0, 3));
        assert_eq!(MeanSd::of(&[4.0]).unwrap().sd, 0.0);
        assert!(MeanSd::of(&[]).is_none());
    }
}
