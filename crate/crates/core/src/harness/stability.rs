use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerKind;

use super::config::RunConfig;
use super::train::train;
use super::HarnessError;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CELLS_FILE: &str = "cells.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const THREADS_ENV: &str = "BRANCHKIT_THREADS";

/// Small enough that a 20-run sweep finishes in well under a minute on one
/// core. Architectures differ only in `kind`.
pub fn stability_toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.layers = 1;
    cfg.model.d = 32;
    cfg.model.heads = 4;
    cfg.task.train_size = 128;
    cfg.task.valid_size = 32;
    cfg.train.epochs = 6;
    cfg.train.warmup_steps = 20;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub arch: LayerKind,
    pub peak_lr: f64,
    pub seed: u64,
    pub diverged: bool,
    pub final_val_loss: f64,
    pub final_ter: f64,
    /// Validation loss before training, then after each completed epoch.
    pub val_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub arch: LayerKind,
    pub peak_lr: f64,
    pub runs: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: Vec<SweepRun>,
    pub cells: Vec<CellSummary>,
}

impl StabilityReport {
    pub fn cell(&self, arch: LayerKind, peak_lr: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.arch == arch && c.peak_lr == peak_lr)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("arch,peak_lr,seed,diverged,final_val_loss,final_ter\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{:?},{:?}",
                r.arch.as_str(),
                r.peak_lr,
                r.seed,
                r.diverged,
                r.final_val_loss,
                r.final_ter
            );
        }
        s
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from("arch,peak_lr,runs,diverged\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{:?},{},{}", c.arch.as_str(), c.peak_lr, c.runs, c.diverged);
        }
        s
    }

    /// Long format; epoch 0 is the untrained model.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("arch,peak_lr,seed,epoch,val_loss\n");
        for r in &self.runs {
            for (e, v) in r.val_curve.iter().enumerate() {
                let _ = writeln!(s, "{},{:?},{},{},{:?}", r.arch.as_str(), r.peak_lr, r.seed, e, v);
            }
        }
        s
    }
}

/// Worker count from `BRANCHKIT_THREADS`; unset or unparsable means one.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Trains `n_seeds` runs for every (architecture, peak lr) cell. Seeds are
/// `base.train.seed + k`; the dataset is shared. Rows come back ordered by
/// architecture, then lr, then seed, whatever the worker count. With `out`
/// set, each run gets its own directory and the CSV tables are written.
pub fn stability_experiment(
    base: &RunConfig,
    archs: &[LayerKind],
    peak_lrs: &[f64],
    n_seeds: usize,
    out: Option<&Path>,
) -> Result<StabilityReport, HarnessError> {
    if n_seeds < 2 {
        return Err(HarnessError::Config(format!("need at least 2 seeds, got {n_seeds}")));
    }
    if archs.is_empty() || peak_lrs.is_empty() {
        return Err(HarnessError::Config("need at least one architecture and one peak lr".into()));
    }
    let mut jobs = Vec::new();
    for &arch in archs {
        for &lr in peak_lrs {
            for k in 0..n_seeds {
                let mut cfg = base.clone();
                cfg.model.kind = arch;
                cfg.train.peak_lr = lr;
                cfg.train.seed = base.train.seed + k as u64;
                cfg.validate()?;
                jobs.push(cfg);
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let run_one = |cfg: &RunConfig| -> Result<SweepRun, HarnessError> {
        let run_dir = out.map(|d| {
            d.join("runs")
                .join(format!("{}-lr{:e}-s{}", cfg.model.kind.as_str(), cfg.train.peak_lr, cfg.train.seed))
        });
        let rec = train(cfg, run_dir.as_deref())?.record;
        let mut val_curve = vec![rec.initial_val_loss];
        val_curve.extend(rec.epochs.iter().map(|e| e.val_loss));
        Ok(SweepRun {
            arch: cfg.model.kind,
            peak_lr: cfg.train.peak_lr,
            seed: cfg.train.seed,
            diverged: rec.diverged,
            final_val_loss: rec.final_val_loss(),
            final_ter: rec.final_ter(),
            val_curve,
        })
    };
    let threads = worker_threads();
    let runs: Vec<SweepRun> = if threads == 1 {
        jobs.iter().map(run_one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run_one).collect::<Result<_, _>>())?
    };

    let mut cells = Vec::new();
    for &arch in archs {
        for &lr in peak_lrs {
            let members = runs.iter().filter(|r| r.arch == arch && r.peak_lr == lr);
            let (n, bad) = members.fold((0, 0), |(n, bad), r| (n + 1, bad + r.diverged as usize));
            cells.push(CellSummary {
                arch,
                peak_lr: lr,
                runs: n,
                diverged: bad,
            });
        }
    }
    let report = StabilityReport { runs, cells };
    if let Some(dir) = out {
        fs::write(dir.join(SUMMARY_FILE), report.summary_csv())?;
        fs::write(dir.join(CELLS_FILE), report.cells_csv())?;
        fs::write(dir.join(CURVES_FILE), report.curves_csv())?;
    }
    Ok(report)
}
