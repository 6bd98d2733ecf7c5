//! Plot-ready CSV series. No rendering happens here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{self, RunError, RunRecord};
use super::FitReport;

/// Trailing mean over the evaluations in `(t − window, t]`. A one-step
/// window returns each value unchanged.
pub fn moving_average(series: &[(u64, f64)], window: u64) -> Vec<(u64, f64)> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut lo = 0;
    let mut sum = 0.0;
    for (hi, &(t, v)) in series.iter().enumerate() {
        sum += v;
        while series[lo].0 + window <= t {
            sum -= series[lo].1;
            lo += 1;
        }
        let n = (hi + 1 - lo) as f64;
        out.push((t, if n == 1.0 { series[hi].1 } else { sum / n }));
    }
    out
}

/// Number of times the series changes side of `threshold` (at-or-above
/// versus below).
pub fn threshold_crossings(series: &[(u64, f64)], threshold: f64) -> usize {
    series.windows(2).filter(|w| (w[0].1 >= threshold) != (w[1].1 >= threshold)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilitySummary {
    pub raw_crossings: usize,
    /// `(window, crossings of the smoothed series)`.
    pub smoothed: Vec<(u64, usize)>,
}

pub const INSTABILITY_WINDOWS: [u64; 2] = [200, 500];

pub fn instability(record: &RunRecord, threshold: f64) -> InstabilitySummary {
    let s = record.test_series();
    InstabilitySummary {
        raw_crossings: threshold_crossings(&s, threshold),
        smoothed: INSTABILITY_WINDOWS.iter().map(|&w| (w, threshold_crossings(&moving_average(&s, w), threshold))).collect(),
    }
}

fn csv_err(p: &Path) -> impl Fn(csv::Error) -> RunError {
    let p = p.display().to_string();
    move |e| RunError::Io { path: p.clone(), source: e.into() }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Defect and accuracy overlay plus the smoothed instability traces of a run.
pub fn export_run(record: &RunRecord, out: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out).map_err(run::io_err(out))?;
    let p = out.join(format!("{}_defect_accuracy.csv", record.run_id));
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["step", "train_acc", "test_acc", "train_loss", "defect_median", "defect_q25", "defect_q75"])
        .map_err(csv_err(&p))?;
    for e in &record.evals {
        w.write_record([
            e.step.to_string(),
            e.train_acc.to_string(),
            e.test_acc.to_string(),
            e.train_loss.to_string(),
            opt(e.defect_median),
            opt(e.defect_q25),
            opt(e.defect_q75),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(run::io_err(&p))?;

    let p = out.join(format!("{}_instability.csv", record.run_id));
    let s = record.test_series();
    let smoothed: Vec<Vec<(u64, f64)>> = INSTABILITY_WINDOWS.iter().map(|&win| moving_average(&s, win)).collect();
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["step", "test_acc", "ma200", "ma500"]).map_err(csv_err(&p))?;
    for (i, (t, v)) in s.iter().enumerate() {
        w.write_record([t.to_string(), v.to_string(), smoothed[0][i].1.to_string(), smoothed[1][i].1.to_string()])
            .map_err(csv_err(&p))?;
    }
    w.flush().map_err(run::io_err(&p))
}

/// Scatter of (grok, lead) per run with the fitted line through it.
pub fn export_scaling(report: &FitReport, out: &Path, name: &str) -> Result<(), RunError> {
    std::fs::create_dir_all(out).map_err(run::io_err(out))?;
    let p = out.join(format!("{name}_scaling.csv"));
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["kind", "lr", "seed", "grok_step", "lead", "fit_lead"]).map_err(csv_err(&p))?;
    let line = |g: f64| report.fit.as_ref().map(|f| f.c * g.powf(f.alpha));
    for r in &report.rows {
        if let Some((g, l)) = r.fit_point() {
            w.write_record(["run".into(), r.lr.to_string(), r.seed.to_string(), g.to_string(), l.to_string(), opt(line(g))])
                .map_err(csv_err(&p))?;
        }
    }
    for g in crate::detect::lr_groups(&report.rows) {
        let fit = report.mean_fit.as_ref().map(|f| f.c * g.mean_grok.powf(f.alpha));
        w.write_record([
            "lr_mean".into(),
            g.lr.to_string(),
            String::new(),
            g.mean_grok.to_string(),
            g.mean_lead.to_string(),
            opt(fit),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(run::io_err(&p))
}

/// Dose-response rows as emitted by the intervention sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseRow {
    pub condition: String,
    pub strength: f64,
    pub seed: u64,
    pub grok_step: Option<u64>,
    pub onset_step: Option<u64>,
    pub flags: Vec<String>,
}

pub fn write_dose_rows(rows: &[DoseRow], path: &Path) -> Result<(), RunError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(run::io_err(d))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["condition", "strength", "seed", "grok_step", "onset_step", "flags"]).map_err(csv_err(path))?;
    for r in rows {
        let o = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.condition.clone(),
            r.strength.to_string(),
            r.seed.to_string(),
            o(r.grok_step),
            o(r.onset_step),
            r.flags.join(";"),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(run::io_err(path))
}
