//! Training-time interventions on the commutator defect: a one-time kick
//! along the dominant commutator direction, gradient-orthogonal noise, and
//! projection or shrinkage of the gradient component outside a learned
//! subspace.

use std::path::PathBuf;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, OrthoBasis};
use crate::params::NamedParams;
use crate::trajectory::{self, SnapshotArchive};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("strength must be finite and non-negative, got {0}")]
    Strength(f64),
    #[error("{condition} strength must lie in [0, 1], got {strength}")]
    Fraction { condition: &'static str, strength: f64 },
    #[error("noise period must be at least 1")]
    Period,
    #[error("{0} needs a basis source run")]
    NoBasisSource(&'static str),
    #[error("no basis for targeted matrix {0}")]
    MissingBasis(String),
    #[error("basis for {name} has dimension {basis}, matrix has {matrix}")]
    BasisDim { name: String, basis: usize, matrix: usize },
    #[error("unknown intervention condition {0:?}")]
    UnknownCondition(String),
    #[error(transparent)]
    Trajectory(#[from] trajectory::TrajectoryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "kick_1a")]
    Kick,
    #[serde(rename = "noise_1a")]
    Noise,
    #[serde(rename = "project_1b")]
    Project,
    #[serde(rename = "penalty_1b")]
    Penalty,
}

impl Condition {
    pub const ALL: [Condition; 5] =
        [Condition::Baseline, Condition::Kick, Condition::Noise, Condition::Project, Condition::Penalty];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Kick => "kick_1a",
            Condition::Noise => "noise_1a",
            Condition::Project => "project_1b",
            Condition::Penalty => "penalty_1b",
        }
    }

    pub fn parse(s: &str) -> Result<Self, InterventionError> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| InterventionError::UnknownCondition(s.to_string()))
    }

    pub fn default_strength(self) -> f64 {
        match self {
            Condition::Baseline => 0.0,
            Condition::Kick => 1e-2,
            Condition::Noise => 1.0,
            Condition::Project => 1.0,
            Condition::Penalty => 0.5,
        }
    }

    /// Conditions that act through a learned-subspace basis.
    pub fn needs_basis(self) -> bool {
        matches!(self, Condition::Project | Condition::Penalty)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub condition: Condition,
    /// κ for the kick, ν for noise, s for projection and penalty.
    pub strength: f64,
    /// Kick step. `None` means the onset step of the baseline run.
    pub trigger: Option<u64>,
    /// Noise injection period in steps.
    pub period: u64,
    /// Baseline run directory supplying the subspace and the onset step.
    pub basis_source: Option<PathBuf>,
    pub basis_rank: usize,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        InterventionSpec::new(Condition::Baseline)
    }
}

impl InterventionSpec {
    pub fn new(condition: Condition) -> Self {
        InterventionSpec {
            condition,
            strength: condition.default_strength(),
            trigger: None,
            period: 10,
            basis_source: None,
            basis_rank: trajectory::DEFAULT_K,
        }
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }

    /// True when the run must be identical to an unmodified baseline.
    pub fn is_noop(&self) -> bool {
        self.condition == Condition::Baseline || self.strength == 0.0
    }

    pub fn validate(&self) -> Result<(), InterventionError> {
        if !(self.strength.is_finite() && self.strength >= 0.0) {
            return Err(InterventionError::Strength(self.strength));
        }
        if self.condition.needs_basis() && self.strength > 1.0 {
            return Err(InterventionError::Fraction { condition: self.condition.as_str(), strength: self.strength });
        }
        if self.condition == Condition::Noise && self.period == 0 {
            return Err(InterventionError::Period);
        }
        let needs_source = !self.is_noop()
            && (self.condition.needs_basis() || (self.condition == Condition::Kick && self.trigger.is_none()));
        if needs_source && self.basis_source.is_none() {
            return Err(InterventionError::NoBasisSource(self.condition.as_str()));
        }
        Ok(())
    }
}

/// Unit top left-singular vector of the matrix whose columns are `deltas`,
/// signed to agree with their sum. `None` when every sample is zero.
pub fn kick_direction(deltas: &[Vec<f64>]) -> Option<Vec<f64>> {
    let live: Vec<&Vec<f64>> = deltas.iter().filter(|d| linalg::norm(d) > 0.0).collect();
    match live.len() {
        0 => None,
        1 => {
            let n = linalg::norm(live[0]);
            Some(live[0].iter().map(|x| x / n).collect())
        }
        m => {
            let g = nalgebra::DMatrix::from_fn(m, m, |i, j| linalg::dot(live[i], live[j]));
            let (_, vecs) = linalg::sym_eigen_desc(g);
            let w = vecs.column(0);
            let mut u = vec![0.0; live[0].len()];
            for (d, &c) in live.iter().zip(w.iter()) {
                u.iter_mut().zip(d.iter()).for_each(|(o, x)| *o += c * x);
            }
            let n = linalg::norm(&u);
            if !(n > 0.0) {
                return None;
            }
            let sum_dot: f64 = live.iter().map(|d| linalg::dot(d, &u)).sum();
            let s = if sum_dot < 0.0 { -1.0 / n } else { 1.0 / n };
            u.iter_mut().for_each(|x| *x *= s);
            Some(u)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KickOutcome {
    pub applied: bool,
    pub param_norm: f64,
    /// Intended displacement `κ·‖θ‖`.
    pub shift: f64,
    pub flag: Option<String>,
}

/// `θ ← θ + κ·‖θ‖·u` along [`kick_direction`] of the samples.
pub fn apply_kick(params: &mut [f32], deltas: &[Vec<f64>], kappa: f64) -> KickOutcome {
    let param_norm = crate::params::l2_norm(params);
    let shift = kappa * param_norm;
    let Some(u) = kick_direction(deltas) else {
        return KickOutcome { applied: false, param_norm, shift: 0.0, flag: Some("kick_zero_delta".into()) };
    };
    if kappa != 0.0 {
        params.iter_mut().zip(&u).for_each(|(p, x)| *p = (*p as f64 + shift * x) as f32);
    }
    KickOutcome { applied: true, param_norm, shift, flag: None }
}

/// Gaussian noise with its component along `grad` removed, scaled to
/// `ν·η·‖g‖`. The flag is set when `grad` is zero and the raw draw is used.
pub fn orthogonal_noise(grad: &[f32], lr: f64, nu: f64, rng: &mut impl Rng) -> (Vec<f64>, bool) {
    let mut n: Vec<f64> = (0..grad.len()).map(|_| rng.sample(StandardNormal)).collect();
    let g: Vec<f64> = grad.iter().map(|&x| x as f64).collect();
    let gn = linalg::norm(&g);
    let raw = !(gn > 0.0);
    if !raw {
        let p = linalg::dot(&n, &g) / (gn * gn);
        n.iter_mut().zip(&g).for_each(|(a, b)| *a -= p * b);
    }
    // A zero gradient would give a zero target; the raw draw is then scaled
    // to ν·η instead.
    let target = if raw { nu * lr } else { nu * lr * gn };
    let nn = linalg::norm(&n);
    let s = if nn > 0.0 { target / nn } else { 0.0 };
    n.iter_mut().for_each(|a| *a *= s);
    (n, raw)
}

/// Adds an injection to the parameters.
pub fn add_noise(params: &mut [f32], noise: &[f64]) {
    params.iter_mut().zip(noise).for_each(|(p, n)| *p = (*p as f64 + n) as f32);
}

/// Per-matrix orthonormal bases in flat matrix coordinates.
#[derive(Clone, Debug, Default)]
pub struct BasisSet {
    pub bases: IndexMap<String, OrthoBasis>,
}

impl BasisSet {
    /// Top-`k` trajectory PCA basis of each named matrix over the whole
    /// archive.
    pub fn from_archive(archive: &SnapshotArchive, names: &[String], k: usize) -> Result<Self, InterventionError> {
        let mut bases = IndexMap::new();
        for name in names {
            let series = archive.series(name, None)?;
            let basis = trajectory::trajectory_pca(&series, k)
                .map(|r| r.basis())
                .ok_or_else(|| InterventionError::MissingBasis(name.clone()))?;
            bases.insert(name.clone(), basis);
        }
        Ok(BasisSet { bases })
    }

    /// Checks that every target has a basis of matching dimension.
    pub fn check_targets(&self, grads_view: &crate::params::ParamView, targets: &[String]) -> Result<(), InterventionError> {
        for t in targets {
            let b = self.bases.get(t).ok_or_else(|| InterventionError::MissingBasis(t.clone()))?;
            let len = grads_view.entry(t).map_or(0, |e| e.len());
            if b.dim() != len {
                return Err(InterventionError::BasisDim { name: t.clone(), basis: b.dim(), matrix: len });
            }
        }
        Ok(())
    }
}

/// `g ← g_∥ + (1−s)·g_⊥` on each matrix with a basis. `s = 0` leaves the
/// gradient untouched and `s = 1` writes exactly `B Bᵀ g`.
pub fn apply_penalty(grads: &mut NamedParams<f32>, set: &BasisSet, s: f64) -> Result<(), InterventionError> {
    if s == 0.0 {
        return Ok(());
    }
    for (name, basis) in &set.bases {
        let g = grads.get_mut(name).ok_or_else(|| InterventionError::MissingBasis(name.clone()))?;
        if basis.dim() != g.len() {
            return Err(InterventionError::BasisDim { name: name.clone(), basis: basis.dim(), matrix: g.len() });
        }
        let g64: Vec<f64> = g.iter().map(|&x| x as f64).collect();
        let par = basis.project(&g64);
        for ((o, &full), p) in g.iter_mut().zip(&g64).zip(&par) {
            *o = if s == 1.0 { *p as f32 } else { (p + (1.0 - s) * (full - p)) as f32 };
        }
    }
    Ok(())
}

/// `g ← B Bᵀ g` on each matrix with a basis.
pub fn apply_project(grads: &mut NamedParams<f32>, set: &BasisSet) -> Result<(), InterventionError> {
    apply_penalty(grads, set, 1.0)
}

/// One full training run per (spec, seed) from the seed's shared
/// initialization. Failed runs become rows with a `failed` flag.
pub fn dose_response(
    base: &crate::harness::ExperimentConfig,
    grid: &[InterventionSpec],
    seeds: &[u64],
    out_root: &std::path::Path,
    jobs: usize,
) -> Vec<crate::harness::export::DoseRow> {
    use crate::harness::{self, export::DoseRow, run};
    let cells: Vec<(InterventionSpec, u64)> =
        grid.iter().flat_map(|g| seeds.iter().map(move |&s| (g.clone(), s))).collect();
    harness::parallel_map(&cells, jobs, |(spec, seed)| {
        let mut c = base.clone();
        c.intervention = spec.clone();
        let dir = out_root.join(run::run_id(&c, *seed));
        match harness::ensure_run(&c, *seed, &dir) {
            Ok(r) => DoseRow {
                condition: spec.condition.as_str().into(),
                strength: spec.strength,
                seed: *seed,
                grok_step: r.grok_step,
                onset_step: r.onset_step,
                flags: r.flags,
            },
            Err(e) => DoseRow {
                condition: spec.condition.as_str().into(),
                strength: spec.strength,
                seed: *seed,
                grok_step: None,
                onset_step: None,
                flags: vec![format!("failed: {e}")],
            },
        }
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{ParamRole, ParamView};

    fn view() -> Arc<ParamView> {
        Arc::new(ParamView::builder().add("a", &[3, 2], ParamRole::Attention).add("b", &[4], ParamRole::Norm).build())
    }

    fn basis_a() -> BasisSet {
        let mut bases = IndexMap::new();
        let e = |i: usize| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        bases.insert("a".to_string(), OrthoBasis::from_vectors(6, &[e(0), e(1)]));
        BasisSet { bases }
    }

    #[test]
    fn single_sample_kick_direction_is_normalized_sample() {
        let d = vec![3.0, 0.0, -4.0];
        let u = kick_direction(&[d.clone()]).unwrap();
        assert_eq!(u, vec![0.6, 0.0, -0.8]);
    }

    #[test]
    fn kick_direction_is_top_singular_vector() {
        let big = vec![1.0, 1.0, 0.0, 0.0];
        let small = vec![0.0, 0.0, 0.1, 0.0];
        let u = kick_direction(&[small.clone(), big.clone(), vec![1.1, 0.9, 0.0, 0.0]]).unwrap();
        assert!((linalg::norm(&u) - 1.0).abs() < 1e-12);
        assert!(u[0] > 0.6 && u[1] > 0.6 && u[2].abs() < 0.05);
        assert_eq!(kick_direction(&[vec![0.0; 3]]), None);
    }

    #[test]
    fn zero_kick_and_zero_delta() {
        let mut p = vec![1.0f32, -2.0, 0.5];
        let before = p.clone();
        let out = apply_kick(&mut p, &[vec![1.0, 2.0, 3.0]], 0.0);
        assert!(out.applied);
        assert_eq!(p, before);
        let out = apply_kick(&mut p, &[vec![0.0; 3]], 0.1);
        assert!(!out.applied);
        assert_eq!(out.flag.as_deref(), Some("kick_zero_delta"));
        assert_eq!(p, before);
    }

    #[test]
    fn noise_is_orthogonal_with_target_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<f32> = (0..500).map(|i| ((i * 13 % 17) as f32 - 8.0) * 0.01).collect();
        let (n, raw) = orthogonal_noise(&g, 1e-3, 1.0, &mut rng);
        assert!(!raw);
        let g64: Vec<f64> = g.iter().map(|&x| x as f64).collect();
        let cos = linalg::dot(&n, &g64) / (linalg::norm(&n) * linalg::norm(&g64));
        assert!(cos.abs() < 1e-6);
        let want = 1e-3 * linalg::norm(&g64);
        assert!((linalg::norm(&n) / want - 1.0).abs() < 1e-6);
        let (_, raw) = orthogonal_noise(&[0.0; 10], 1e-3, 1.0, &mut rng);
        assert!(raw);
    }

    #[test]
    fn penalty_limits_and_halving() {
        let set = basis_a();
        let g0 = NamedParams::from_flat(view(), vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);

        let mut g = g0.clone();
        apply_penalty(&mut g, &set, 0.0).unwrap();
        assert_eq!(g, g0);

        let mut p = g0.clone();
        apply_project(&mut p, &set).unwrap();
        assert_eq!(p.get("a").unwrap(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.get("b").unwrap(), g0.get("b").unwrap());
        let mut q = g0.clone();
        apply_penalty(&mut q, &set, 1.0).unwrap();
        assert_eq!(p, q);
        let mut twice = p.clone();
        apply_project(&mut twice, &set).unwrap();
        assert_eq!(twice, p);

        let mut h = NamedParams::from_flat(view(), vec![0.0f32, 0.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
        apply_penalty(&mut h, &set, 0.5).unwrap();
        assert_eq!(h.get("a").unwrap(), &[0.0, 0.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn missing_or_mismatched_basis_is_an_error() {
        let set = basis_a();
        let v = view();
        assert!(set.check_targets(&v, &["a".to_string()]).is_ok());
        assert!(matches!(set.check_targets(&v, &["b".to_string()]), Err(InterventionError::MissingBasis(_))));
        let mut bad = BasisSet::default();
        bad.bases.insert("b".into(), OrthoBasis::from_vectors(6, &[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]));
        let mut g = NamedParams::<f32>::zeros(v);
        assert!(matches!(apply_penalty(&mut g, &bad, 0.5), Err(InterventionError::BasisDim { .. })));
    }

    #[test]
    fn spec_validation() {
        assert!(InterventionSpec::new(Condition::Baseline).validate().is_ok());
        assert!(InterventionSpec::new(Condition::Project).validate().is_err());
        assert!(InterventionSpec::new(Condition::Project).with_strength(0.0).validate().is_ok());
        assert!(InterventionSpec::new(Condition::Noise).validate().is_ok());
        assert!(InterventionSpec::new(Condition::Noise).with_strength(-1.0).validate().is_err());
        let mut p = InterventionSpec::new(Condition::Penalty);
        p.basis_source = Some("x".into());
        assert!(p.clone().validate().is_ok());
        assert!(p.with_strength(1.5).validate().is_err());
        let mut k = InterventionSpec::new(Condition::Kick);
        assert!(k.validate().is_err());
        k.trigger = Some(200);
        assert!(k.validate().is_ok());
        assert_eq!(Condition::parse("kick_1a").unwrap(), Condition::Kick);
        assert!(Condition::parse("kick").is_err());
    }
}
