//! Experiment orchestration: configuration, training runs, sweeps,
//! post-hoc analysis and plot-data export.

pub mod analysis;
pub mod config;
pub mod export;
pub mod run;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use config::{ConfigError, ExperimentConfig, Task};
pub use run::{ensure_run, train_run, MetricRecord, RunError, RunRecord};

use crate::detect::{self, RunRow, ScalingFit};

/// Per-run fit and learning-rate mean fit over a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rows: Vec<RunRow>,
    pub fit: Option<ScalingFit>,
    pub mean_fit: Option<ScalingFit>,
    pub flags: Vec<String>,
}

pub fn fit_rows(rows: Vec<RunRow>) -> FitReport {
    let mut flags = Vec::new();
    let fit = detect::fit_runs(&rows).map_err(|e| flags.push(format!("fit: {e}"))).ok();
    let mean_fit = detect::lr_mean_fit(&rows).map_err(|e| flags.push(format!("mean_fit: {e}"))).ok();
    FitReport { rows, fit, mean_fit, flags }
}

#[derive(Debug)]
pub struct SweepResult {
    /// In grid order (learning rate major, seed minor).
    pub runs: Vec<(f64, u64, Result<RunRecord, RunError>)>,
    pub report: FitReport,
}

/// Runs `f` over `items` on up to `jobs` threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("result lock").into_iter().map(|r| r.expect("every item ran")).collect()
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// One run per (learning rate, seed) under `out_root`, then the fits over
/// the rows that grokked with a detected onset.
pub fn sweep(template: &ExperimentConfig, lrs: &[f64], seeds: &[u64], out_root: &Path, jobs: usize) -> SweepResult {
    let cells: Vec<(f64, u64)> = lrs.iter().flat_map(|&lr| seeds.iter().map(move |&s| (lr, s))).collect();
    let runs = parallel_map(&cells, jobs, |&(lr, seed)| {
        let mut c = template.clone();
        c.lr = lr;
        let dir = out_root.join(run::run_id(&c, seed));
        (lr, seed, ensure_run(&c, seed, &dir))
    });
    let rows = runs
        .iter()
        .map(|(lr, seed, r)| match r {
            Ok(rec) => rec.row(),
            Err(e) => RunRow { lr: *lr, seed: *seed, grok_step: None, onset_step: None, flags: vec![format!("failed: {e}")] },
        })
        .collect();
    let report = fit_rows(rows);
    SweepResult { runs, report }
}

/// Writes the sweep's summary rows and fits.
pub fn write_report(report: &FitReport, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(run::io_err(dir))?;
    let path = dir.join("sweep_summary.csv");
    let f = std::fs::File::create(&path).map_err(run::io_err(&path))?;
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| RunError::Io { path: path.display().to_string(), source: e.into() };
    w.write_record(["lr", "seed", "grok_step", "onset_step", "lead", "lead_fraction", "flags"]).map_err(csv_err)?;
    for r in &report.rows {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let lead = r.lead();
        w.write_record([
            r.lr.to_string(),
            r.seed.to_string(),
            opt(r.grok_step),
            opt(r.onset_step),
            lead.map(|l| l.dt.to_string()).unwrap_or_default(),
            lead.map(|l| format!("{:.4}", l.fraction)).unwrap_or_default(),
            r.flags.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(run::io_err(&path))?;
    let fit_path = dir.join("fit.json");
    let text = serde_json::to_string_pretty(report).map_err(run::json_err(&fit_path))?;
    std::fs::write(&fit_path, text).map_err(run::io_err(&fit_path))
}

/// The directory a run of `config` with `seed` occupies under its output root.
pub fn run_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config.output_dir.join(run::run_id(config, seed))
}
