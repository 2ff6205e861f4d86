//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{FaceError, Result};

/// Copies the average of `m` and `m^T` into `m`, making it exactly symmetric.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of a symmetric matrix, adding `eps * I` with `eps`
/// escalated tenfold from `start` (relative to the mean diagonal) up to
/// `limit` until the factorization succeeds. Returns the factor and the
/// absolute ridge that was used (zero if none was needed and `start` is zero).
pub fn cholesky_with_ridge(
    m: &DMatrix<f64>,
    start: f64,
    limit: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = start;
    loop {
        let ridge = rel * scale;
        let mut shifted = m.clone();
        for k in 0..n {
            shifted[(k, k)] += ridge;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok((chol, ridge));
        }
        rel = if rel == 0.0 { 1e-12 } else { rel * 10.0 };
        if rel > limit * (1.0 + 1e-9) {
            return Err(FaceError::Singular(format!(
                "Cholesky failed after ridge escalation to {limit:e} (relative); try fewer knots"
            )));
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `count` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (count - 1) as f64))
        .collect()
}

/// `count` equispaced points on `[0, 1]` inclusive.
pub fn unit_grid(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5];
    }
    (0..count).map(|k| k as f64 / (count - 1) as f64).collect()
}
