//! Small dense linear-algebra helpers in f64: orthonormal bases embedded in
//! flat parameter coordinates, random bases, Gram-matrix PCA and SVD.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// `k` orthonormal columns in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoBasis {
    dim: usize,
    cols: Vec<Vec<f64>>,
}

impl OrthoBasis {
    /// Accepts columns that are orthonormal within `tol`.
    pub fn new(dim: usize, cols: Vec<Vec<f64>>, tol: f64) -> Option<Self> {
        if cols.iter().any(|c| c.len() != dim) {
            return None;
        }
        for i in 0..cols.len() {
            for j in 0..=i {
                let d = dot(&cols[i], &cols[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > tol {
                    return None;
                }
            }
        }
        Some(OrthoBasis { dim, cols })
    }

    /// Orthonormalizes `vectors` by two passes of modified Gram-Schmidt,
    /// dropping those whose residual falls below `1e-10` of their norm.
    pub fn from_vectors(dim: usize, vectors: &[Vec<f64>]) -> Self {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
        for v in vectors {
            assert_eq!(v.len(), dim, "vector length");
            let n0 = norm(v);
            if n0 == 0.0 {
                continue;
            }
            let mut w = v.clone();
            for _ in 0..2 {
                for c in &cols {
                    let p = dot(&w, c);
                    w.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = norm(&w);
            if n > 1e-10 * n0 {
                w.iter_mut().for_each(|x| *x /= n);
                cols.push(w);
            }
        }
        OrthoBasis { dim, cols }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.cols.len()
    }

    pub fn cols(&self) -> &[Vec<f64>] {
        &self.cols
    }

    /// Coefficients `Bᵀ x`.
    pub fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|c| dot(c, x)).collect()
    }

    /// `B Bᵀ x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, a) in self.cols.iter().zip(self.coefficients(x)) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
        }
        out
    }

    /// Largest deviation of `BᵀB` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.cols.len() {
            for j in 0..=i {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(&self.cols[i], &self.cols[j]) - want).abs());
            }
        }
        worst
    }
}

/// Haar-random orthonormal `k`-frame in `R^dim`.
pub fn random_basis(dim: usize, k: usize, rng: &mut impl Rng) -> OrthoBasis {
    assert!(k <= dim, "basis rank exceeds dimension");
    loop {
        let vs: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(dim, rng)).collect();
        let b = OrthoBasis::from_vectors(dim, &vs);
        if b.rank() == k {
            return b;
        }
    }
}

pub fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigen-decomposition of a symmetric matrix, eigenpairs sorted by
/// descending eigenvalue. Eigenvectors are the columns of the result.
pub fn sym_eigen_desc(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Gram matrix `R Rᵀ` of row vectors.
pub fn gram(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = dot(&rows[i], &rows[j]);
            g[(i, j)] = d;
            g[(j, i)] = d;
        }
    }
    g
}

/// Gram matrix of the column-centered rows, from the raw Gram `M` of the
/// first `m` rows: `C M C` with `C = I - 11ᵀ/m`.
pub fn centered_gram(raw: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let sub = raw.view((0, 0), (m, m));
    let row_mean: Vec<f64> = (0..m).map(|i| sub.row(i).sum() / m as f64).collect();
    let total = row_mean.iter().sum::<f64>() / m as f64;
    DMatrix::from_fn(m, m, |i, j| sub[(i, j)] - row_mean[i] - row_mean[j] + total)
}

/// Top-`k` right singular directions (in the row space) and all squared
/// singular values of the matrix whose rows are `rows`, through its Gram.
/// Directions with non-positive singular value are omitted.
pub fn row_space_pca(rows: &[Vec<f64>], g: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (vals, vecs) = sym_eigen_desc(g.clone());
    let sq: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
    let dim = rows.first().map_or(0, Vec::len);
    let scale = sq.first().copied().unwrap_or(0.0);
    let mut dirs = Vec::new();
    for (c, &s2) in sq.iter().enumerate().take(k) {
        if s2 <= 1e-12 * scale || s2 == 0.0 {
            break;
        }
        let mut v = vec![0.0; dim];
        for (r, row) in rows.iter().enumerate() {
            let w = vecs[(r, c)];
            v.iter_mut().zip(row).for_each(|(o, x)| *o += w * x);
        }
        let s = s2.sqrt();
        v.iter_mut().for_each(|x| *x /= s);
        dirs.push(v);
    }
    (sq, dirs)
}

/// Thin SVD of a row-major `rows × cols` matrix: `(U columns, σ, V columns)`
/// for the top `k` singular values, sorted descending.
pub fn top_svd(data: &[f64], rows: usize, cols: usize, k: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = k.min(order.len());
    let mut us = Vec::with_capacity(k);
    let mut ss = Vec::with_capacity(k);
    let mut vs = Vec::with_capacity(k);
    for &i in &order[..k] {
        us.push(u.column(i).iter().copied().collect());
        ss.push(svd.singular_values[i]);
        vs.push(vt.row(i).iter().copied().collect());
    }
    (us, ss, vs)
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gram_schmidt_drops_dependent_vectors() {
        let b = OrthoBasis::from_vectors(3, &[vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(b.rank(), 2);
        assert!(b.orthonormality_error() < 1e-12);
    }

    #[test]
    fn random_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_basis(500, 5, &mut rng);
        assert!(b.orthonormality_error() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&s, 0.75), 4.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn gram_pca_matches_direct_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| gaussian_vec(40, &mut rng)).collect();
        let flat: Vec<f64> = rows.concat();
        let (_, s, v) = top_svd(&flat, 6, 40, 3);
        let (sq, dirs) = row_space_pca(&rows, &gram(&rows), 3);
        for i in 0..3 {
            assert!((sq[i].sqrt() - s[i]).abs() < 1e-9 * s[0]);
            assert!((dot(&dirs[i], &v[i]).abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn centered_gram_matches_explicit_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| gaussian_vec(10, &mut rng)).collect();
        let raw = gram(&rows);
        let m = 5;
        let mean_row: Vec<f64> = (0..10).map(|j| rows[..m].iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
        let centered: Vec<Vec<f64>> = rows[..m].iter().map(|r| r.iter().zip(&mean_row).map(|(a, b)| a - b).collect()).collect();
        let direct = gram(&centered);
        assert!((centered_gram(&raw, m) - direct).abs().max() < 1e-12);
    }
}
