//! Post-hoc analysis of a finished run directory: trajectory PCA, the
//! random-walk null, attention/MLP spectral split and the phase-resolved
//! integrability table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::run::{self, RunError, RunRecord};
use crate::integrability::{self, BasisKind, PhaseAssignment, PhaseSample, PhaseTable};
use crate::rng;
use crate::trajectory::{self, MatrixClass, NullModelResult, Pc1Series, SnapshotArchive, SpectralSplit, TrajectoryError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("analysis precondition failed: {0}")]
    Precondition(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub n_null: usize,
    pub n_rand: usize,
    pub k: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { n_null: 20, n_rand: 5, k: trajectory::DEFAULT_K }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullRow {
    pub matrix: String,
    pub class: MatrixClass,
    pub result: NullModelResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub pc1: Vec<Pc1Series>,
    pub null: Vec<NullRow>,
    pub split: SpectralSplit,
    pub phases: PhaseAssignment,
    pub integrability: PhaseTable,
}

impl RunAnalysis {
    pub fn max_attention_z(&self) -> Option<f64> {
        self.null
            .iter()
            .filter(|r| r.class == MatrixClass::Attention && r.result.z.is_finite())
            .map(|r| r.result.z)
            .max_by(f64::total_cmp)
    }
}

/// Expanding PC1 curves for every archived matrix.
pub fn pc1_curves(archive: &SnapshotArchive) -> Result<Vec<Pc1Series>, TrajectoryError> {
    let names: Vec<String> = archive.matrix_names().map(str::to_string).collect();
    names.iter().map(|n| trajectory::expanding_pc1(&archive.series(n, None)?)).collect()
}

/// Random-walk null z-score per attention and MLP matrix.
pub fn null_rows(archive: &SnapshotArchive, n_null: usize, seed: u64) -> Result<Vec<NullRow>, TrajectoryError> {
    let mut rng = rng::stream(seed, rng::NULL);
    let mut out = Vec::new();
    let names: Vec<String> = archive.matrix_names().map(str::to_string).collect();
    for name in names {
        let Some(class) = trajectory::matrix_class(&name) else { continue };
        let result = trajectory::random_walk_null(&archive.series(&name, None)?, n_null, &mut rng)?;
        out.push(NullRow { matrix: name, class, result });
    }
    Ok(out)
}

/// Phase ranges of a run from its own metric stream and detectors.
pub fn phases_of(record: &RunRecord) -> PhaseAssignment {
    let evals: Vec<integrability::EvalPoint> = record.evals.iter().map(|e| (e.step, e.train_acc, e.test_acc)).collect();
    integrability::assign_phases(&evals, record.onset_step, record.grok_step, record.last_step)
}

/// Exec/random ratio per (phase, basis) over every stored commutator
/// sample, restricted block-wise to each archived matrix.
pub fn integrability_table(
    dir: &Path,
    record: &RunRecord,
    phases: &PhaseAssignment,
    opts: &AnalysisOptions,
) -> Result<PhaseTable, AnalysisError> {
    let samples = dir.join(run::SAMPLE_DIR);
    let weights = SnapshotArchive::open(samples.join("weights"))?;
    let grads = SnapshotArchive::open(samples.join("grad_accum"))?;
    let mut deltas = Vec::new();
    for i in 0.. {
        let d = samples.join(format!("delta_{i}"));
        if !d.exists() {
            break;
        }
        deltas.push(SnapshotArchive::open(d)?);
    }
    if deltas.is_empty() {
        return Err(AnalysisError::Precondition(format!("{} has no stored commutator samples", samples.display())));
    }
    let Some(&first) = weights.steps().first() else {
        return Err(AnalysisError::Precondition("no weight samples".into()));
    };
    let entries = weights.manifest().matrices.clone();
    let f64s = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
    let mut rng = rng::stream(record.seed, &format!("{}/integrability", rng::NULL));
    let mut table_samples = Vec::new();
    for &step in weights.steps() {
        let Some(phase) = phases.phase_of(step) else { continue };
        for e in &entries {
            let (rows, cols) = e.dims2();
            let w = f64s(weights.read_matrix(step, &e.name)?);
            let w0 = f64s(weights.read_matrix(first, &e.name)?);
            let dw: Vec<f64> = w.iter().zip(&w0).map(|(a, b)| a - b).collect();
            let g = f64s(grads.read_matrix(step, &e.name)?);
            let bases = vec![
                (BasisKind::WeightSvd, integrability::build_basis(&w, rows, cols, opts.k)),
                (BasisKind::DeltaWSvd, integrability::build_basis(&dw, rows, cols, opts.k)),
                (BasisKind::GradSvd, integrability::build_basis(&g, rows, cols, opts.k)),
            ];
            for d in &deltas {
                if !d.steps().contains(&step) {
                    continue;
                }
                let delta = f64s(d.read_matrix(step, &e.name)?);
                table_samples.push(PhaseSample { phase, step, matrix: e.name.clone(), delta, bases: bases.clone() });
            }
        }
    }
    Ok(integrability::phase_ratios(&table_samples, opts.n_rand, &mut rng))
}

pub fn analyze_run(dir: &Path, opts: &AnalysisOptions) -> Result<RunAnalysis, AnalysisError> {
    let record = RunRecord::load(dir)?;
    let archive = SnapshotArchive::open(dir.join(run::SNAPSHOT_DIR))?;
    if archive.steps().len() < 3 {
        return Err(AnalysisError::Precondition(format!(
            "{} holds {} snapshots, at least 3 are needed",
            archive.dir().display(),
            archive.steps().len()
        )));
    }
    let pc1 = pc1_curves(&archive)?;
    let null = null_rows(&archive, opts.n_null, record.seed)?;
    let split = trajectory::spectral_split(&archive)?;
    let phases = phases_of(&record);
    let integrability = integrability_table(dir, &record, &phases, opts)?;
    Ok(RunAnalysis { pc1, null, split, phases, integrability })
}

/// Writes `pc1.csv`, `null.csv`, `spectral.csv`, `phases.json` and
/// `integrability.csv` into `dir`.
pub fn write_analysis(a: &RunAnalysis, dir: &Path) -> Result<(), RunError> {
    let csv_err = |p: &Path| {
        let p = p.display().to_string();
        move |e: csv::Error| RunError::Io { path: p.clone(), source: e.into() }
    };
    let p = dir.join("pc1.csv");
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["matrix", "step", "pc1_pct"]).map_err(csv_err(&p))?;
    for s in &a.pc1 {
        for (step, v) in &s.points {
            w.write_record([s.matrix.clone(), step.to_string(), v.map(|x| format!("{x:.4}")).unwrap_or_default()])
                .map_err(csv_err(&p))?;
        }
    }
    w.flush().map_err(run::io_err(&p))?;

    let p = dir.join("null.csv");
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["matrix", "class", "observed_pc1", "null_mean", "null_std", "z"]).map_err(csv_err(&p))?;
    for r in &a.null {
        let class = match r.class {
            MatrixClass::Attention => "attention",
            MatrixClass::Mlp => "mlp",
        };
        w.write_record([
            r.matrix.clone(),
            class.into(),
            format!("{:.4}", r.result.observed),
            format!("{:.4}", r.result.null_mean),
            format!("{:.4}", r.result.null_std),
            format!("{:.3}", r.result.z),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(run::io_err(&p))?;

    let p = dir.join("spectral.csv");
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["matrix", "final_pc1_pct", "turnover_step", "peak_step"]).map_err(csv_err(&p))?;
    for s in &a.pc1 {
        let last = s.points.last().and_then(|p| p.1);
        w.write_record([
            s.matrix.clone(),
            last.map(|x| format!("{x:.4}")).unwrap_or_default(),
            s.turnover.map(|t| t.to_string()).unwrap_or_default(),
            s.peak.map(|p| p.0.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(run::io_err(&p))?;

    let p = dir.join("phases.json");
    let text = serde_json::to_string_pretty(&a.phases).map_err(run::json_err(&p))?;
    std::fs::write(&p, text).map_err(run::io_err(&p))?;

    let p = dir.join("integrability.csv");
    let f = std::fs::File::create(&p).map_err(run::io_err(&p))?;
    a.integrability.write_csv(f).map_err(csv_err(&p))?;
    Ok(())
}
