//! Weight-snapshot archives and execution-manifold analyses.
//!
//! An archive directory holds `manifest.json` plus one `step_XXXXXXXXXX.bin`
//! per recorded step. Each binary file is the manifest's matrices as flat
//! little-endian f32 arrays, concatenated in manifest order.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, centered_gram, gaussian_vec, gram, mean, norm, row_space_pca, std_dev, OrthoBasis};
use crate::params::{NamedParams, ParamRole, ParamView};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("archive {run_id}{}: {source}", step.map(|s| format!(" step {s}")).unwrap_or_default())]
    Io { run_id: String, step: Option<u64>, source: std::io::Error },
    #[error("archive manifest {path}: {source}")]
    Manifest { path: String, source: serde_json::Error },
    #[error("unknown matrix {0}")]
    UnknownMatrix(String),
    #[error("step {step} is not after the last recorded step {last}")]
    NotIncreasing { step: u64, last: u64 },
    #[error("snapshot has {actual} values, manifest expects {expected}")]
    Length { expected: usize, actual: usize },
    #[error("need at least {needed} snapshots, archive has {have}")]
    TooFew { needed: usize, have: usize },
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl MatrixEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of a 2-D matrix; vectors count as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => (1, self.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub interval: u64,
    pub matrices: Vec<MatrixEntry>,
    pub steps: Vec<u64>,
}

impl Manifest {
    pub fn total_len(&self) -> usize {
        self.matrices.iter().map(MatrixEntry::len).sum()
    }

    pub fn entry(&self, name: &str) -> Option<&MatrixEntry> {
        self.matrices.iter().find(|m| m.name == name)
    }
}

/// Attention and MLP weight matrices of a parameter layout, in layout order.
pub fn default_matrices(view: &ParamView) -> Vec<String> {
    view.entries()
        .filter(|e| matches!(e.role, ParamRole::Attention | ParamRole::Mlp) && e.shape.len() == 2)
        .map(|e| e.name.clone())
        .collect()
}

/// Attention and MLP matrices of the deepest decoder layer only.
pub fn deepest_decoder_matrices(view: &ParamView) -> Vec<String> {
    let deepest = view
        .names()
        .filter_map(|n| n.strip_prefix("dec.layers.")?.split('.').next()?.parse::<usize>().ok())
        .max();
    let prefix = match deepest {
        Some(l) => format!("dec.layers.{l}."),
        None => return default_matrices(view),
    };
    default_matrices(view).into_iter().filter(|n| n.starts_with(&prefix)).collect()
}

pub struct SnapshotArchive {
    dir: PathBuf,
    manifest: Manifest,
}

impl SnapshotArchive {
    /// Starts an empty archive, replacing any manifest already in `dir`.
    pub fn create(dir: impl Into<PathBuf>, run_id: &str, interval: u64, view: &ParamView, names: &[String]) -> Result<Self> {
        let dir = dir.into();
        let mut matrices = Vec::with_capacity(names.len());
        let mut offset = 0;
        for n in names {
            let e = view.entry(n).ok_or_else(|| TrajectoryError::UnknownMatrix(n.clone()))?;
            matrices.push(MatrixEntry { name: n.clone(), shape: e.shape.clone(), offset });
            offset += e.len();
        }
        let manifest = Manifest { run_id: run_id.to_string(), interval, matrices, steps: Vec::new() };
        let a = SnapshotArchive { dir, manifest };
        fs::create_dir_all(&a.dir).map_err(|e| a.io(None, e))?;
        a.write_manifest()?;
        Ok(a)
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| TrajectoryError::Io {
            run_id: dir.display().to_string(),
            step: None,
            source: e,
        })?;
        let manifest = serde_json::from_str(&text)
            .map_err(|e| TrajectoryError::Manifest { path: path.display().to_string(), source: e })?;
        Ok(SnapshotArchive { dir, manifest })
    }

    fn io(&self, step: Option<u64>, e: std::io::Error) -> TrajectoryError {
        TrajectoryError::Io { run_id: self.manifest.run_id.clone(), step, source: e }
    }

    fn write_manifest(&self) -> Result<()> {
        let tmp = self.dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&tmp, text).map_err(|e| self.io(None, e))?;
        fs::rename(&tmp, self.dir.join("manifest.json")).map_err(|e| self.io(None, e))
    }

    fn step_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:010}.bin"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn steps(&self) -> &[u64] {
        &self.manifest.steps
    }

    pub fn matrix_names(&self) -> impl Iterator<Item = &str> {
        self.manifest.matrices.iter().map(|m| m.name.as_str())
    }

    /// Appends the manifest matrices of `params`.
    pub fn record(&mut self, step: u64, params: &NamedParams<f32>) -> Result<()> {
        let mut flat = Vec::with_capacity(self.manifest.total_len());
        for m in &self.manifest.matrices {
            flat.extend_from_slice(params.get(&m.name).ok_or_else(|| TrajectoryError::UnknownMatrix(m.name.clone()))?);
        }
        self.record_flat(step, &flat)
    }

    /// Appends one step from a full flat parameter-shaped vector.
    pub fn record_from_full<T: Copy + Into<f64>>(&mut self, step: u64, view: &ParamView, full: &[T]) -> Result<()> {
        let mut flat = Vec::with_capacity(self.manifest.total_len());
        for m in &self.manifest.matrices {
            let e = view.entry(&m.name).ok_or_else(|| TrajectoryError::UnknownMatrix(m.name.clone()))?;
            flat.extend(full[e.range()].iter().map(|&v| v.into() as f32));
        }
        self.record_flat(step, &flat)
    }

    /// Appends one step already laid out in manifest order.
    pub fn record_flat(&mut self, step: u64, flat: &[f32]) -> Result<()> {
        if let Some(&last) = self.manifest.steps.last() {
            if step <= last {
                return Err(TrajectoryError::NotIncreasing { step, last });
            }
        }
        let expected = self.manifest.total_len();
        if flat.len() != expected {
            return Err(TrajectoryError::Length { expected, actual: flat.len() });
        }
        let mut bytes = Vec::with_capacity(flat.len() * 4);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = self.step_path(step);
        let mut f = File::create(&path).map_err(|e| self.io(Some(step), e))?;
        f.write_all(&bytes).map_err(|e| self.io(Some(step), e))?;
        self.manifest.steps.push(step);
        self.write_manifest()
    }

    /// Drops every recorded step after `step` (used when resuming).
    pub fn truncate_after(&mut self, step: u64) -> Result<()> {
        let drop: Vec<u64> = self.manifest.steps.iter().copied().filter(|&s| s > step).collect();
        for s in drop {
            let _ = fs::remove_file(self.step_path(s));
        }
        self.manifest.steps.retain(|&s| s <= step);
        self.write_manifest()
    }

    pub fn read(&self, step: u64) -> Result<Vec<f32>> {
        let bytes = fs::read(self.step_path(step)).map_err(|e| self.io(Some(step), e))?;
        let expected = self.manifest.total_len();
        if bytes.len() != expected * 4 {
            return Err(TrajectoryError::Length { expected, actual: bytes.len() / 4 });
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn read_matrix(&self, step: u64, name: &str) -> Result<Vec<f32>> {
        let m = self.manifest.entry(name).ok_or_else(|| TrajectoryError::UnknownMatrix(name.to_string()))?;
        let mut f = File::open(self.step_path(step)).map_err(|e| self.io(Some(step), e))?;
        f.seek(SeekFrom::Start((m.offset * 4) as u64)).map_err(|e| self.io(Some(step), e))?;
        let mut buf = vec![0u8; m.len() * 4];
        f.read_exact(&mut buf).map_err(|e| self.io(Some(step), e))?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    /// All snapshots of one matrix with step ≤ `through`.
    pub fn series(&self, name: &str, through: Option<u64>) -> Result<MatrixSeries> {
        let mut steps = Vec::new();
        let mut values = Vec::new();
        for &s in &self.manifest.steps {
            if through.is_some_and(|t| s > t) {
                break;
            }
            values.push(self.read_matrix(s, name)?);
            steps.push(s);
        }
        Ok(MatrixSeries { name: name.to_string(), steps, values })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSeries {
    pub name: String,
    pub steps: Vec<u64>,
    pub values: Vec<Vec<f32>>,
}

impl MatrixSeries {
    /// Rows `vec(W_τ − W_0)`, not centered.
    pub fn displacement_rows(&self) -> Vec<Vec<f64>> {
        let w0 = match self.values.first() {
            Some(w) => w,
            None => return Vec::new(),
        };
        self.values.iter().map(|w| w.iter().zip(w0).map(|(a, b)| *a as f64 - *b as f64).collect()).collect()
    }
}

/// Trajectory matrix through step `through`: rows `vec(W_τ − W_0)`, then
/// column-centered.
pub fn trajectory_matrix(archive: &SnapshotArchive, name: &str, through: u64) -> Result<Vec<Vec<f64>>> {
    let series = archive.series(name, Some(through))?;
    if series.steps.len() < 2 {
        return Err(TrajectoryError::TooFew { needed: 2, have: series.steps.len() });
    }
    Ok(center_rows(&series.displacement_rows()))
}

pub fn center_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
    }
    rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect()
}

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Window end step.
    pub step: u64,
    /// `σ_k² / Σ σ_i²`, descending.
    pub ratios: Vec<f64>,
    pub pc1: f64,
    /// Top-K right singular vectors in the matrix's flat coordinates.
    #[serde(skip)]
    pub basis: Vec<Vec<f64>>,
}

impl PcaResult {
    pub fn basis(&self) -> OrthoBasis {
        OrthoBasis::from_vectors(self.basis.first().map_or(0, Vec::len), &self.basis)
    }
}

fn pca_from_gram(rows: Option<&[Vec<f64>]>, g: &nalgebra::DMatrix<f64>, step: u64, k: usize) -> Option<PcaResult> {
    let (sq, basis) = match rows {
        Some(rows) => row_space_pca(rows, g, k),
        None => (linalg::sym_eigen_desc(g.clone()).0.into_iter().map(|v| v.max(0.0)).collect(), Vec::new()),
    };
    let total: f64 = sq.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let ratios: Vec<f64> = sq.iter().map(|s| s / total).collect();
    Some(PcaResult { step, pc1: 100.0 * ratios[0], ratios, basis })
}

/// One-shot PCA of already centered rows. `None` for an all-zero matrix.
pub fn pca(centered: &[Vec<f64>], step: u64, k: usize) -> Option<PcaResult> {
    pca_from_gram(Some(centered), &gram(centered), step, k)
}

/// PCA of the full trajectory of one matrix, with its top-`k` basis.
pub fn trajectory_pca(series: &MatrixSeries, k: usize) -> Option<PcaResult> {
    let centered = center_rows(&series.displacement_rows());
    pca(&centered, *series.steps.last()?, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pc1Series {
    pub matrix: String,
    /// `(window end step, PC1%)`; `None` for a zero window.
    pub points: Vec<(u64, Option<f64>)>,
    pub peak: Option<(u64, f64)>,
    pub turnover: Option<u64>,
}

/// Expanding-window PC1% from three snapshots up to the whole archive.
pub fn expanding_pc1(series: &MatrixSeries) -> Result<Pc1Series> {
    let n = series.steps.len();
    if n < 3 {
        return Err(TrajectoryError::TooFew { needed: 3, have: n });
    }
    let raw = gram(&series.displacement_rows());
    let points: Vec<(u64, Option<f64>)> = (3..=n)
        .map(|m| (series.steps[m - 1], pca_from_gram(None, &centered_gram(&raw, m), series.steps[m - 1], 0).map(|p| p.pc1)))
        .collect();
    let peak = peak_of(&points);
    let turnover = turnover_step(&points, 2.0);
    Ok(Pc1Series { matrix: series.name.clone(), points, peak, turnover })
}

fn peak_of(points: &[(u64, Option<f64>)]) -> Option<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for &(s, v) in points {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((s, v));
            }
        }
    }
    best
}

/// First step where PC1% falls below `peak − margin` and never again
/// exceeds the peak. The peak is the global maximum up to that point.
pub fn turnover_step(points: &[(u64, Option<f64>)], margin: f64) -> Option<u64> {
    let vals: Vec<(u64, f64)> = points.iter().filter_map(|&(s, v)| Some((s, v?))).collect();
    let mut running_peak = f64::NEG_INFINITY;
    for (i, &(s, v)) in vals.iter().enumerate() {
        if v > running_peak {
            running_peak = v;
            continue;
        }
        if v < running_peak - margin && vals[i..].iter().all(|&(_, w)| w <= running_peak) {
            return Some(s);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullModelResult {
    pub observed: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub z: f64,
    pub n_null: usize,
}

/// Per-step displacement norms `‖W_τ − W_{τ−1}‖`.
pub fn step_norms(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.windows(2).map(|w| norm(&w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect::<Vec<_>>())).collect()
}

/// A walk from the origin whose τ-th step has length `norms[τ]` and a
/// uniformly random direction.
pub fn null_trajectory(norms: &[f64], dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(norms.len() + 1);
    let mut cur = vec![0.0; dim];
    rows.push(cur.clone());
    for &n in norms {
        let mut u = gaussian_vec(dim, rng);
        let un = norm(&u);
        u.iter_mut().for_each(|x| *x *= n / un);
        cur.iter_mut().zip(&u).for_each(|(c, d)| *c += d);
        rows.push(cur.clone());
    }
    rows
}

fn pc1_of_rows(rows: &[Vec<f64>]) -> Option<f64> {
    let centered = center_rows(rows);
    pca_from_gram(None, &gram(&centered), 0, 0).map(|p| p.pc1)
}

/// z-score of the full-trajectory PC1% against `n_null` norm-matched random walks.
pub fn random_walk_null(series: &MatrixSeries, n_null: usize, rng: &mut impl Rng) -> Result<NullModelResult> {
    let n = series.steps.len();
    if n < 3 {
        return Err(TrajectoryError::TooFew { needed: 3, have: n });
    }
    let rows = series.displacement_rows();
    let observed = pc1_of_rows(&rows).unwrap_or(0.0);
    let norms = step_norms(&rows);
    let dim = rows[0].len();
    let nulls: Vec<f64> = (0..n_null).map(|_| pc1_of_rows(&null_trajectory(&norms, dim, rng)).unwrap_or(0.0)).collect();
    let null_mean = mean(&nulls);
    let null_std = if n_null >= 2 { std_dev(&nulls) } else { 0.0 };
    let z = if null_std > 0.0 { (observed - null_mean) / null_std } else { f64::NAN };
    Ok(NullModelResult { observed, null_mean, null_std, z, n_null })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixClass {
    Attention,
    Mlp,
}

pub fn matrix_class(name: &str) -> Option<MatrixClass> {
    match name.rsplit('.').next()? {
        "W_Q" | "W_K" | "W_V" | "W_O" => Some(MatrixClass::Attention),
        "W_up" | "W_down" => Some(MatrixClass::Mlp),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSplit {
    pub per_matrix: Vec<(String, MatrixClass, f64)>,
    pub attention_mean: Option<f64>,
    pub mlp_mean: Option<f64>,
}

/// Final-window PC1% per matrix, averaged within attention and MLP groups.
pub fn spectral_split(archive: &SnapshotArchive) -> Result<SpectralSplit> {
    let mut per_matrix = Vec::new();
    for name in archive.matrix_names() {
        let Some(class) = matrix_class(name) else { continue };
        let series = archive.series(name, None)?;
        if series.steps.len() < 2 {
            return Err(TrajectoryError::TooFew { needed: 2, have: series.steps.len() });
        }
        let pc1 = pc1_of_rows(&series.displacement_rows()).unwrap_or(0.0);
        per_matrix.push((name.to_string(), class, pc1));
    }
    let group = |c: MatrixClass| {
        let v: Vec<f64> = per_matrix.iter().filter(|(_, k, _)| *k == c).map(|(_, _, p)| *p).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let attention_mean = group(MatrixClass::Attention);
    let mlp_mean = group(MatrixClass::Mlp);
    Ok(SpectralSplit { per_matrix, attention_mean, mlp_mean })
}
