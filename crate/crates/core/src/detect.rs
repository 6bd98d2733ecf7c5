//! Grokking and defect-onset detectors, lead times and power-law fits.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("onset baseline is not finite ({baseline}) for run {run}")]
    Baseline { run: String, baseline: f64 },
    #[error("onset needs {needed} defect measurements for the baseline, series has {have}")]
    TooShort { needed: usize, have: usize },
    #[error("power-law fit needs at least 3 valid points, got {valid} ({excluded} excluded)")]
    TooFewPoints { valid: usize, excluded: usize },
    #[error("lr-mean fit needs at least 3 learning-rate groups, got {0}")]
    TooFewGroups(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub n_sustained: usize,
    pub onset_multiplier: f64,
    pub onset_floor: f64,
    pub baseline_window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { threshold: 0.98, n_sustained: 3, onset_multiplier: 10.0, onset_floor: 20.0, baseline_window: 3 }
    }
}

/// Step of the first evaluation that starts `n_sustained` consecutive
/// evaluations at or above the threshold.
pub fn detect_grok(series: &[(u64, f64)], config: &DetectorConfig) -> Option<u64> {
    let n = config.n_sustained.max(1);
    let mut run = 0usize;
    for (i, &(_, acc)) in series.iter().enumerate() {
        if acc >= config.threshold {
            run += 1;
            if run == n {
                return Some(series[i + 1 - n].0);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// First step whose defect median exceeds `max(multiplier × baseline, floor)`,
/// where the baseline is the median of the first `baseline_window` present
/// measurements. Missing measurements are skipped.
pub fn detect_onset(run: &str, series: &[(u64, Option<f64>)], config: &DetectorConfig) -> Result<Option<u64>, DetectError> {
    let present: Vec<(u64, f64)> = series.iter().filter_map(|&(s, v)| Some((s, v?))).collect();
    let w = config.baseline_window.max(1);
    if present.len() < w {
        return Err(DetectError::TooShort { needed: w, have: present.len() });
    }
    let mut head: Vec<f64> = present[..w].iter().map(|p| p.1).collect();
    head.sort_by(f64::total_cmp);
    let baseline = crate::linalg::quantile(&head, 0.5);
    if !baseline.is_finite() {
        return Err(DetectError::Baseline { run: run.to_string(), baseline });
    }
    let bar = (config.onset_multiplier * baseline).max(config.onset_floor);
    Ok(present.iter().find(|(_, v)| *v > bar).map(|p| p.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadTime {
    pub dt: i64,
    pub fraction: f64,
    /// False for a negative lead (onset after grok).
    pub valid: bool,
}

pub fn lead_time(grok: u64, onset: u64) -> LeadTime {
    let dt = grok as i64 - onset as i64;
    let fraction = if grok == 0 { 0.0 } else { dt as f64 / grok as f64 };
    LeadTime { dt, fraction, valid: dt >= 0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitDomain {
    PerRun,
    LrMeans,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Ordinary least squares on `(ln t_grok, ln Δt)`.
    LogOls,
    /// Least squares on `Δt − C·t^α` in linear space, started from the log fit.
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub c: f64,
    pub alpha: f64,
    /// Coefficient of determination in log space.
    pub r2: f64,
    pub se_alpha: f64,
    pub n: usize,
    pub domain: FitDomain,
    pub method: FitMethod,
    /// Indices of input points dropped for non-positive values.
    pub excluded: Vec<usize>,
    pub points: Vec<(f64, f64)>,
}

struct LogFit {
    slope: f64,
    intercept: f64,
    se: f64,
}

fn log_ols(points: &[(f64, f64)]) -> LogFit {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let se = if n > 2.0 { (ss_res / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    LogFit { slope, intercept, se }
}

fn split_valid(points: &[(f64, f64)]) -> (Vec<(f64, f64)>, Vec<usize>) {
    let mut valid = Vec::new();
    let mut excluded = Vec::new();
    for (i, &(t, d)) in points.iter().enumerate() {
        if t > 0.0 && d > 0.0 && t.is_finite() && d.is_finite() {
            valid.push((t, d));
        } else {
            excluded.push(i);
        }
    }
    (valid, excluded)
}

/// Fits `Δt = C · t_grok^α` to `(t_grok, Δt)` points.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit, DetectError> {
    fit_power_law_with(points, FitMethod::LogOls)
}

pub fn fit_power_law_with(points: &[(f64, f64)], method: FitMethod) -> Result<ScalingFit, DetectError> {
    let (valid, excluded) = split_valid(points);
    if valid.len() < 3 {
        return Err(DetectError::TooFewPoints { valid: valid.len(), excluded: excluded.len() });
    }
    let lf = log_ols(&valid);
    let (c, alpha) = match method {
        FitMethod::LogOls => (lf.intercept.exp(), lf.slope),
        FitMethod::Nonlinear => nonlinear(&valid, lf.intercept.exp(), lf.slope),
    };
    // R² and SE(α) are always reported in log space for comparability.
    let n = valid.len() as f64;
    let xs: Vec<f64> = valid.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = valid.iter().map(|p| p.1.ln()).collect();
    let my = ys.iter().sum::<f64>() / n;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - c.ln() - alpha * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    let se_alpha = match method {
        FitMethod::LogOls => lf.se,
        FitMethod::Nonlinear => {
            let mx = xs.iter().sum::<f64>() / n;
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            (ss_res / (n - 2.0) / sxx).sqrt()
        }
    };
    Ok(ScalingFit { c, alpha, r2, se_alpha, n: valid.len(), domain: FitDomain::PerRun, method, excluded, points: valid })
}

/// Levenberg-Marquardt on the linear-space residuals, parameters `(ln C, α)`.
fn nonlinear(points: &[(f64, f64)], c0: f64, a0: f64) -> (f64, f64) {
    let sse = |lc: f64, a: f64| points.iter().map(|&(t, d)| (d - (lc + a * t.ln()).exp()).powi(2)).sum::<f64>();
    let (mut lc, mut a) = (c0.ln(), a0);
    let mut lambda = 1e-3;
    let mut cur = sse(lc, a);
    for _ in 0..200 {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for &(t, d) in points {
            let f = (lc + a * t.ln()).exp();
            let j = Vector2::new(f, f * t.ln());
            jtj += j * j.transpose();
            jtr += j * (d - f);
        }
        let damped = jtj + Matrix2::from_diagonal(&jtj.diagonal()) * lambda;
        let Some(step) = damped.lu().solve(&jtr) else { break };
        let (nlc, na) = (lc + step[0], a + step[1]);
        let next = sse(nlc, na);
        if next < cur {
            let done = (cur - next) <= 1e-14 * cur;
            lc = nlc;
            a = na;
            cur = next;
            lambda = (lambda / 10.0).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (lc.exp(), a)
}

/// One run's detector outcome, in the per-run table schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub lr: f64,
    pub seed: u64,
    pub grok_step: Option<u64>,
    pub onset_step: Option<u64>,
    pub flags: Vec<String>,
}

impl RunRow {
    pub fn lead(&self) -> Option<LeadTime> {
        Some(lead_time(self.grok_step?, self.onset_step?))
    }

    /// `(t_grok, Δt)` for runs with both detections and a non-negative lead.
    pub fn fit_point(&self) -> Option<(f64, f64)> {
        let l = self.lead()?;
        l.valid.then(|| (self.grok_step.unwrap() as f64, l.dt as f64))
    }
}

/// Per-run fit over rows with valid lead times.
pub fn fit_runs(rows: &[RunRow]) -> Result<ScalingFit, DetectError> {
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(RunRow::fit_point).collect();
    fit_power_law(&pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrGroup {
    pub lr: f64,
    pub n: usize,
    pub mean_grok: f64,
    pub mean_lead: f64,
    pub mean_fraction: f64,
}

/// Valid runs averaged per learning rate (ascending).
pub fn lr_groups(rows: &[RunRow]) -> Vec<LrGroup> {
    let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(p) = r.fit_point() {
            groups.entry(r.lr.to_bits()).or_default().push(p);
        }
    }
    let mut out: Vec<LrGroup> = groups
        .into_iter()
        .map(|(lr, pts)| {
            let n = pts.len() as f64;
            LrGroup {
                lr: f64::from_bits(lr),
                n: pts.len(),
                mean_grok: pts.iter().map(|p| p.0).sum::<f64>() / n,
                mean_lead: pts.iter().map(|p| p.1).sum::<f64>() / n,
                mean_fraction: pts.iter().map(|p| p.1 / p.0).sum::<f64>() / n,
            }
        })
        .collect();
    out.sort_by(|a, b| a.lr.total_cmp(&b.lr));
    out
}

/// Power-law fit on per-learning-rate means of valid runs.
pub fn lr_mean_fit(rows: &[RunRow]) -> Result<ScalingFit, DetectError> {
    let groups = lr_groups(rows);
    if groups.len() < 3 {
        return Err(DetectError::TooFewGroups(groups.len()));
    }
    let pts: Vec<(f64, f64)> = groups.iter().map(|g| (g.mean_grok, g.mean_lead)).collect();
    let mut fit = fit_power_law(&pts)?;
    fit.domain = FitDomain::LrMeans;
    Ok(fit)
}

/// Reference per-run tables, for regression tests and the `fit` command.
pub mod fixtures {
    use super::RunRow;

    /// `(lr, seed, grok, onset)`.
    pub type Row = (f64, u64, Option<u64>, Option<u64>);

    pub const SCAN_RUNS: &[Row] = &[
        (1e-5, 42, Some(115_000), Some(3_000)),
        (5e-5, 42, Some(14_500), Some(1_000)),
        (5e-5, 137, Some(27_000), Some(2_000)),
        (5e-5, 2024, Some(14_000), Some(2_000)),
        (1e-4, 42, Some(6_500), Some(700)),
        (1e-4, 137, Some(7_000), Some(1_700)),
        (1e-4, 2024, Some(7_200), Some(1_000)),
        (5e-4, 42, Some(1_800), Some(1_000)),
        (5e-4, 137, Some(16_000), Some(1_500)),
        (5e-4, 2024, Some(4_000), Some(1_500)),
        (1e-3, 42, Some(1_700), Some(800)),
        (1e-3, 2024, Some(2_500), None),
    ];

    pub const DYCK_RUNS: &[Row] = &[
        (3e-5, 42, Some(68_000), Some(3_000)),
        (1e-4, 42, Some(29_000), Some(13_500)),
        (1e-4, 137, Some(44_000), Some(1_000)),
        (1e-4, 2024, Some(32_000), Some(9_000)),
        (5e-4, 42, Some(5_800), Some(600)),
        (5e-4, 137, Some(6_800), Some(400)),
        (5e-4, 2024, Some(10_800), Some(1_000)),
        (1e-3, 42, Some(2_900), Some(200)),
        (1e-3, 137, Some(4_400), Some(200)),
        (1e-3, 2024, Some(7_500), Some(200)),
        (3e-3, 42, Some(2_100), Some(500)),
        (3e-3, 2024, Some(1_200), Some(1_000)),
        (1e-2, 42, Some(11_900), Some(900)),
        (1e-2, 137, Some(2_900), Some(300)),
        (1e-2, 2024, Some(3_700), Some(200)),
    ];

    /// `(lr, n_seeds, mean grok, mean lead, mean lead fraction)`.
    pub type MeanRow = (f64, usize, f64, f64, f64);

    pub const SCAN_LR_MEANS: &[MeanRow] = &[
        (1e-5, 1, 115_000.0, 112_000.0, 0.974),
        (5e-5, 3, 18_500.0, 16_833.0, 0.905),
        (1e-4, 3, 6_900.0, 5_767.0, 0.837),
        (5e-4, 3, 7_267.0, 5_933.0, 0.659),
        (1e-3, 1, 1_700.0, 900.0, 0.529),
    ];

    pub const DYCK_LR_MEANS: &[MeanRow] = &[
        (3e-5, 1, 68_000.0, 65_000.0, 0.956),
        (1e-4, 3, 35_000.0, 27_200.0, 0.744),
        (5e-4, 3, 7_800.0, 7_100.0, 0.915),
        (1e-3, 3, 4_900.0, 4_700.0, 0.953),
        (3e-3, 2, 1_650.0, 900.0, 0.464),
        (1e-2, 3, 6_200.0, 5_700.0, 0.922),
    ];

    pub fn rows(table: &[Row]) -> Vec<RunRow> {
        table
            .iter()
            .map(|&(lr, seed, grok_step, onset_step)| RunRow { lr, seed, grok_step, onset_step, flags: Vec::new() })
            .collect()
    }

    /// Mean rows as single-seed pseudo-runs, so `lr_mean_fit` passes them through.
    pub fn mean_rows(table: &[MeanRow]) -> Vec<RunRow> {
        table
            .iter()
            .map(|&(lr, _, g, l, _)| RunRow {
                lr,
                seed: 0,
                grok_step: Some(g.round() as u64),
                onset_step: Some((g - l).round() as u64),
                flags: Vec::new(),
            })
            .collect()
    }
}
