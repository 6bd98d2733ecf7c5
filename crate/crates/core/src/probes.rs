//! Commutator-defect probes and their projection onto learned subspaces.
//!
//! All probes work on a frozen copy of the parameters and never touch
//! optimizer state. The two-batch composition uses plain SGD steps:
//!
//! ```text
//! θ_AB = θ − η g_A(θ) − η g_B(θ − η g_A(θ))
//! θ_BA = θ − η g_B(θ) − η g_A(θ − η g_B(θ))
//! δ    = θ_AB − θ_BA
//! D    = ‖δ‖ / (‖η g_A‖ ‖η g_B‖)
//! ```
//!
//! `δ` is assembled as `η[(g_A(θ−ηg_B) − g_A(θ)) − (g_B(θ−ηg_A) − g_B(θ))]`,
//! which is algebraically identical but avoids subtracting two nearly equal
//! f32 parameter vectors.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{norm, quantile, random_basis, OrthoBasis};
use crate::models::{loss_and_grad, ModelConfig, ModelError};
use crate::params::NamedParams;
use crate::tasks::TaskDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectProbeConfig {
    /// Probe step size `η_comm`.
    pub eta: f64,
    /// Independent batch pairs per probe.
    pub k_meas: usize,
    pub batch_size: usize,
    /// Perturbations `‖η g‖` below this trigger rescaling of `η`.
    pub floor: f64,
    /// Rescaling multiplies `η` by 10 until both perturbations reach this.
    pub target: f64,
    /// Steps between probes.
    pub interval: u64,
}

impl DefectProbeConfig {
    pub fn dyck() -> Self {
        DefectProbeConfig { eta: 1e-3, k_meas: 5, batch_size: 16, floor: 1e-6, target: 1e-5, interval: 100 }
    }

    pub fn scan() -> Self {
        DefectProbeConfig { batch_size: 64, ..Self::dyck() }
    }

    /// Probe cadence tied to the training rate: every 100 steps for
    /// `lr ≥ 5e-4`, otherwise every 500.
    pub fn interval_for_lr(lr: f64) -> u64 {
        if lr >= 5e-4 {
            100
        } else {
            500
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(format!("probe eta must be positive, got {}", self.eta));
        }
        if self.k_meas == 0 || self.batch_size == 0 || self.interval == 0 {
            return Err("probe k_meas, batch_size and interval must be at least 1".into());
        }
        if !(self.floor > 0.0 && self.target >= self.floor) {
            return Err("probe scaling needs 0 < floor <= target".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectResult {
    pub d: f64,
    /// Effective step size after adaptive scaling.
    pub eta: f64,
    pub rescaled: bool,
    /// `‖η g_A(θ)‖` and `‖η g_B(θ)‖` at the effective step size.
    pub step_norm_a: f64,
    pub step_norm_b: f64,
    pub delta: Vec<f64>,
}

impl DefectResult {
    pub fn delta_norm(&self) -> f64 {
        norm(&self.delta)
    }
}

const MAX_RESCALE: u32 = 12;

fn finite(g: &[f32]) -> bool {
    g.iter().all(|v| v.is_finite())
}

fn step_from(theta: &[f32], g: &[f32], eta: f64) -> Vec<f32> {
    let e = eta as f32;
    theta.iter().zip(g).map(|(t, g)| t - e * g).collect()
}

/// One commutator measurement from two gradient fields: exactly four
/// gradient evaluations. Returns `Ok(None)` for a degenerate measurement
/// (a zero or non-finite gradient, or perturbations that stay below the
/// floor after rescaling).
pub fn measure_defect<E>(
    theta: &[f32],
    grad_a: &mut dyn FnMut(&[f32]) -> Result<Vec<f32>, E>,
    grad_b: &mut dyn FnMut(&[f32]) -> Result<Vec<f32>, E>,
    eta: f64,
    floor: f64,
    target: f64,
) -> Result<Option<DefectResult>, E> {
    let ga = grad_a(theta)?;
    let gb = grad_b(theta)?;
    if !finite(&ga) || !finite(&gb) {
        return Ok(None);
    }
    let (na, nb) = (crate::params::l2_norm(&ga), crate::params::l2_norm(&gb));
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    let mut eta = eta;
    let mut rescaled = false;
    if eta * na.min(nb) < floor {
        let mut k = 0;
        while eta * na.min(nb) < target && k < MAX_RESCALE {
            eta *= 10.0;
            k += 1;
        }
        rescaled = true;
        if eta * na.min(nb) < floor {
            return Ok(None);
        }
    }
    let ga_after_b = grad_a(&step_from(theta, &gb, eta))?;
    let gb_after_a = grad_b(&step_from(theta, &ga, eta))?;
    if !finite(&ga_after_b) || !finite(&gb_after_a) {
        return Ok(None);
    }
    let delta: Vec<f64> = (0..theta.len())
        .map(|i| {
            let da = ga_after_b[i] as f64 - ga[i] as f64;
            let db = gb_after_a[i] as f64 - gb[i] as f64;
            eta * (da - db)
        })
        .collect();
    let (sa, sb) = (eta * na, eta * nb);
    let d = norm(&delta) / (sa * sb);
    Ok(Some(DefectResult { d, eta, rescaled, step_norm_a: sa, step_norm_b: sb, delta }))
}

/// Scalar summary of one batch pair within a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSample {
    pub d: Option<f64>,
    pub eta: f64,
    pub rescaled: bool,
    pub step_norm_a: f64,
    pub step_norm_b: f64,
    pub delta_norm: f64,
    pub batch_a: Vec<usize>,
    pub batch_b: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectMeasurement {
    pub step: u64,
    /// `None` when every pair was degenerate.
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub samples: Vec<DefectSample>,
    /// Full commutator vectors of the first retained pairs.
    #[serde(skip)]
    pub deltas: Vec<Vec<f64>>,
}

impl DefectMeasurement {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().filter_map(|s| s.d).collect()
    }

    pub fn is_missing(&self) -> bool {
        self.median.is_none()
    }
}

/// Median and quartiles (linear interpolation) of the finite values.
pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some((quantile(&v, 0.5), quantile(&v, 0.25), quantile(&v, 0.75)))
}

/// Draws two disjoint batches (without replacement across the pair).
pub fn sample_pair(n: usize, batch_size: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let bs = batch_size.min(n / 2).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let a = idx[..bs].to_vec();
    let b = idx[bs..(2 * bs).min(n)].to_vec();
    (a, b)
}

/// `k_meas` independent commutator measurements at the current parameters.
/// The first `keep_deltas` full commutator vectors are retained.
pub fn probe_at_step(
    model: &ModelConfig,
    params: &NamedParams<f32>,
    train: &TaskDataset,
    config: &DefectProbeConfig,
    step: u64,
    keep_deltas: usize,
    rng: &mut impl Rng,
) -> Result<DefectMeasurement, ModelError> {
    let view = params.view().clone();
    let mut samples = Vec::with_capacity(config.k_meas);
    let mut deltas = Vec::new();
    for _ in 0..config.k_meas {
        let (a, b) = sample_pair(train.len(), config.batch_size, rng);
        let (ba, bb) = (train.batch(&a), train.batch(&b));
        let grad = |batch: &crate::tasks::TaskBatch, theta: &[f32]| {
            let p = NamedParams::from_flat(view.clone(), theta.to_vec());
            loss_and_grad(model, &p, batch).map(|(_, g)| g.into_flat())
        };
        let mut ga = |t: &[f32]| grad(&ba, t);
        let mut gb = |t: &[f32]| grad(&bb, t);
        let res = measure_defect(params.flat(), &mut ga, &mut gb, config.eta, config.floor, config.target)?;
        let sample = match &res {
            Some(r) => DefectSample {
                d: Some(r.d),
                eta: r.eta,
                rescaled: r.rescaled,
                step_norm_a: r.step_norm_a,
                step_norm_b: r.step_norm_b,
                delta_norm: r.delta_norm(),
                batch_a: a,
                batch_b: b,
            },
            None => DefectSample {
                d: None,
                eta: config.eta,
                rescaled: false,
                step_norm_a: 0.0,
                step_norm_b: 0.0,
                delta_norm: 0.0,
                batch_a: a,
                batch_b: b,
            },
        };
        samples.push(sample);
        if let Some(r) = res {
            if deltas.len() < keep_deltas {
                deltas.push(r.delta);
            }
        }
    }
    let values: Vec<f64> = samples.iter().filter_map(|s| s.d).collect();
    let summary = summarize(&values);
    Ok(DefectMeasurement {
        step,
        median: summary.map(|s| s.0),
        q25: summary.map(|s| s.1),
        q75: summary.map(|s| s.2),
        samples,
        deltas,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// `‖δ_⊥‖ / ‖δ‖`; `None` for a zero commutator.
    pub rho: Option<f64>,
    pub parallel_norm: f64,
    pub residual_norm: f64,
    pub k: usize,
    pub p: usize,
}

impl ProjectionResult {
    pub fn parallel_fraction(&self) -> Option<f64> {
        let total = (self.parallel_norm.powi(2) + self.residual_norm.powi(2)).sqrt();
        (total > 0.0).then(|| self.parallel_norm / total)
    }
}

/// Splits `δ` into its component in `span(B)` and the residual.
pub fn project_commutator(delta: &[f64], basis: &OrthoBasis) -> ProjectionResult {
    assert_eq!(delta.len(), basis.dim(), "commutator and basis dimensions differ");
    let par = basis.project(delta);
    let parallel_norm = norm(&par);
    let residual: Vec<f64> = delta.iter().zip(&par).map(|(d, p)| d - p).collect();
    let residual_norm = norm(&residual);
    let total = norm(delta);
    let rho = (total > 0.0).then(|| (residual_norm / total).clamp(0.0, 1.0));
    ProjectionResult { rho, parallel_norm, residual_norm, k: basis.rank(), p: basis.dim() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecRandom {
    pub ratio: f64,
    pub exec_fraction: f64,
    pub random_fraction: f64,
    pub n_rand: usize,
}

/// Parallel fraction onto `basis` relative to the mean over `n_rand`
/// random orthonormal bases of the same rank.
pub fn exec_random_ratio(delta: &[f64], basis: &OrthoBasis, n_rand: usize, rng: &mut impl Rng) -> Option<ExecRandom> {
    let exec_fraction = project_commutator(delta, basis).parallel_fraction()?;
    let mut acc = 0.0;
    for _ in 0..n_rand {
        let r = random_basis(basis.dim(), basis.rank(), rng);
        acc += project_commutator(delta, &r).parallel_fraction()?;
    }
    let random_fraction = acc / n_rand as f64;
    (random_fraction > 0.0).then(|| ExecRandom { ratio: exec_fraction / random_fraction, exec_fraction, random_fraction, n_rand })
}
