//! Three-basis integrability decomposition: commutator vectors projected onto
//! per-matrix Weight-SVD, ΔW-SVD and accumulated-gradient-SVD subspaces,
//! compared with random subspaces of equal rank, per training phase.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{random_basis, top_svd, OrthoBasis};
use crate::probes::project_commutator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    WeightSvd,
    DeltaWSvd,
    GradSvd,
}

impl BasisKind {
    pub const ALL: [BasisKind; 3] = [BasisKind::WeightSvd, BasisKind::DeltaWSvd, BasisKind::GradSvd];

    pub fn as_str(self) -> &'static str {
        match self {
            BasisKind::WeightSvd => "weight_svd",
            BasisKind::DeltaWSvd => "delta_w_svd",
            BasisKind::GradSvd => "grad_svd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixBasis {
    pub basis: OrthoBasis,
    /// Fewer than the requested `k` directions were available.
    pub truncated: bool,
}

/// `vec(u_i v_iᵀ)` for the top-`k` singular pairs of a row-major
/// `rows × cols` matrix. Pairs with negligible singular value are dropped
/// and flagged; an all-zero source gives an empty basis.
pub fn build_basis(source: &[f64], rows: usize, cols: usize, k: usize) -> MatrixBasis {
    assert_eq!(source.len(), rows * cols, "source shape");
    let dim = rows * cols;
    if source.iter().all(|v| *v == 0.0) {
        return MatrixBasis { basis: OrthoBasis::from_vectors(dim, &[]), truncated: true };
    }
    let (us, ss, vs) = top_svd(source, rows, cols, k);
    let smax = ss.first().copied().unwrap_or(0.0);
    let mut dirs = Vec::new();
    for ((u, s), v) in us.iter().zip(&ss).zip(&vs) {
        if *s <= 1e-10 * smax {
            break;
        }
        let mut d = Vec::with_capacity(dim);
        for a in u {
            d.extend(v.iter().map(|b| a * b));
        }
        dirs.push(d);
    }
    let truncated = dirs.len() < k;
    MatrixBasis { basis: OrthoBasis::from_vectors(dim, &dirs), truncated }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Early,
    Memorization,
    PreGrok,
    PostGrok,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Early, Phase::Memorization, Phase::PreGrok, Phase::PostGrok];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Early => "early",
            Phase::Memorization => "memorization",
            Phase::PreGrok => "pre_grok",
            Phase::PostGrok => "post_grok",
        }
    }
}

/// Half-open step interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRange {
    pub phase: Phase,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseAssignment {
    /// Disjoint, ordered, one per present phase.
    pub ranges: Vec<PhaseRange>,
    pub absent: Vec<Phase>,
}

impl PhaseAssignment {
    pub fn phase_of(&self, step: u64) -> Option<Phase> {
        self.ranges.iter().find(|r| r.start <= step && step < r.end).map(|r| r.phase)
    }

    pub fn range(&self, phase: Phase) -> Option<PhaseRange> {
        self.ranges.iter().copied().find(|r| r.phase == phase)
    }
}

/// One evaluation row: `(step, train accuracy, test accuracy)`.
pub type EvalPoint = (u64, f64, f64);

/// Raw phase intervals:
/// early `[0, first step with train > 0.5)`;
/// memorization from the first evaluation with train ≥ 0.99 and test < 0.5
/// until the condition first fails; pre-grok `[onset, grok)`; post-grok
/// `[grok, end]`. Where intervals overlap the later phase wins.
pub fn assign_phases(evals: &[EvalPoint], onset: Option<u64>, grok: Option<u64>, end: u64) -> PhaseAssignment {
    let stop = end + 1;
    let mut raw: Vec<(Phase, u64, u64)> = Vec::new();
    let early_end = evals.iter().find(|e| e.1 > 0.5).map_or(stop, |e| e.0);
    if early_end > 0 {
        raw.push((Phase::Early, 0, early_end));
    }
    let memorizing = |e: &EvalPoint| e.1 >= 0.99 && e.2 < 0.5;
    if let Some(i) = evals.iter().position(memorizing) {
        let end_mem = evals[i..].iter().find(|e| !memorizing(e)).map_or(stop, |e| e.0);
        raw.push((Phase::Memorization, evals[i].0, end_mem));
    }
    if let (Some(o), Some(g)) = (onset, grok) {
        if o < g {
            raw.push((Phase::PreGrok, o, g));
        }
    }
    if let Some(g) = grok {
        raw.push((Phase::PostGrok, g, stop));
    }
    // Label each elementary interval between boundaries; later phases win.
    let mut cuts: Vec<u64> = raw.iter().flat_map(|r| [r.1, r.2]).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut ranges: Vec<PhaseRange> = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let label = raw.iter().filter(|r| r.1 <= a && a < r.2).map(|r| r.0).max();
        if let Some(phase) = label {
            match ranges.last_mut() {
                Some(last) if last.phase == phase && last.end == a => last.end = b,
                _ => ranges.push(PhaseRange { phase, start: a, end: b }),
            }
        }
    }
    // A phase interrupted by a later one keeps only its first piece.
    let mut seen = Vec::new();
    ranges.retain(|r| {
        if seen.contains(&r.phase) {
            false
        } else {
            seen.push(r.phase);
            true
        }
    });
    let absent = Phase::ALL.iter().copied().filter(|p| !seen.contains(p)).collect();
    PhaseAssignment { ranges, absent }
}

/// One commutator block with the bases it is compared against.
pub struct PhaseSample {
    pub phase: Phase,
    pub step: u64,
    pub matrix: String,
    pub delta: Vec<f64>,
    pub bases: Vec<(BasisKind, MatrixBasis)>,
}

/// Exec/random ratio of one block against each of its bases. Random bases
/// are drawn once per distinct rank and shared across the sample's bases.
pub fn sample_ratios(sample: &PhaseSample, n_rand: usize, rng: &mut impl Rng) -> Vec<(BasisKind, Option<f64>)> {
    let total = crate::linalg::norm(&sample.delta);
    let mut random_by_rank: BTreeMap<usize, Option<f64>> = BTreeMap::new();
    let mut out = Vec::new();
    for (kind, mb) in &sample.bases {
        let k = mb.basis.rank();
        if k == 0 || total == 0.0 || n_rand == 0 {
            out.push((*kind, None));
            continue;
        }
        let rand_frac = *random_by_rank.entry(k).or_insert_with(|| {
            let mut acc = 0.0;
            for _ in 0..n_rand {
                let r = random_basis(mb.basis.dim(), k, rng);
                acc += project_commutator(&sample.delta, &r).parallel_fraction()?;
            }
            Some(acc / n_rand as f64)
        });
        let exec = project_commutator(&sample.delta, &mb.basis).parallel_fraction();
        out.push((*kind, exec.zip(rand_frac).filter(|(_, r)| *r > 0.0).map(|(e, r)| e / r)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub phase: Phase,
    pub kind: BasisKind,
    /// Mean over samples; `None` for an empty cell.
    pub mean_ratio: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub cells: Vec<PhaseCell>,
}

impl PhaseTable {
    pub fn get(&self, phase: Phase, kind: BasisKind) -> Option<f64> {
        self.cells.iter().find(|c| c.phase == phase && c.kind == kind)?.mean_ratio
    }

    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["phase", "basis", "mean_ratio", "n"])?;
        for c in &self.cells {
            let ratio = c.mean_ratio.map(|r| format!("{r:.6}")).unwrap_or_default();
            wr.write_record([c.phase.as_str(), c.kind.as_str(), &ratio, &c.n.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Mean exec/random ratio per (phase, basis kind) cell.
pub fn phase_ratios(samples: &[PhaseSample], n_rand: usize, rng: &mut impl Rng) -> PhaseTable {
    let mut sums: BTreeMap<(Phase, BasisKind), (f64, usize)> = BTreeMap::new();
    for s in samples {
        for (kind, r) in sample_ratios(s, n_rand, rng) {
            if let Some(r) = r {
                let e = sums.entry((s.phase, kind)).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
    }
    let cells = Phase::ALL
        .iter()
        .flat_map(|&phase| BasisKind::ALL.iter().map(move |&kind| (phase, kind)))
        .map(|(phase, kind)| {
            let (sum, n) = sums.get(&(phase, kind)).copied().unwrap_or((0.0, 0));
            PhaseCell { phase, kind, mean_ratio: (n > 0).then(|| sum / n as f64), n }
        })
        .collect();
    PhaseTable { cells }
}
