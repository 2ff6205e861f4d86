//! B-spline bases with quantile knots and the penalty algebra of the symmetric
//! tensor-product smoother.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};
use crate::linalg::quantile_sorted;

pub const DEFAULT_INTERIOR_KNOTS: usize = 10;
pub const DEFAULT_ORDER: usize = 4;

/// B-spline basis on `[0, 1]` with boundary knots replicated `order` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    order: usize,
    interior_knots: Vec<f64>,
    #[serde(skip)]
    full_knots: Vec<f64>,
}

impl SplineBasis {
    /// Builds a basis from explicit interior knots, which must be strictly
    /// increasing and inside `(0, 1)`.
    pub fn from_interior_knots(interior_knots: Vec<f64>, order: usize) -> Result<Self> {
        if order < 2 {
            return Err(FaceError::InvalidInput(format!("spline order must be >= 2, got {order}")));
        }
        let inside = interior_knots.iter().all(|&k| k > 0.0 && k < 1.0);
        let increasing = interior_knots.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(FaceError::InvalidInput(
                "interior knots must be strictly increasing inside (0, 1)".into(),
            ));
        }
        let mut full_knots = vec![0.0; order];
        full_knots.extend_from_slice(&interior_knots);
        full_knots.extend(std::iter::repeat_n(1.0, order));
        Ok(Self { order, interior_knots, full_knots })
    }

    /// Restores the knot vector after deserialization.
    pub fn rebuilt(self) -> Result<Self> {
        Self::from_interior_knots(self.interior_knots, self.order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn full_knots(&self) -> &[f64] {
        &self.full_knots
    }

    /// Basis dimension `c`.
    pub fn dim(&self) -> usize {
        self.interior_knots.len() + self.order
    }

    /// Index of the first nonzero basis function at `t` and the `order`
    /// values starting there. `t = 1` belongs to the last nonempty span.
    pub fn eval_nonzero(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FaceError::OutOfDomain { value: t });
        }
        let p = self.order - 1;
        let c = self.dim();
        let u = &self.full_knots;
        // largest span in [p, c-1] with u[span] <= t
        let span = {
            let (mut lo, mut hi) = (p, c - 1);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if u[mid] <= t {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            lo
        };
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((span - p, values))
    }

    /// Full basis vector `b(t)` of length `c`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let (start, vals) = self.eval_nonzero(t)?;
        let mut b = DVector::zeros(self.dim());
        for (k, v) in vals.into_iter().enumerate() {
            b[start + k] = v;
        }
        Ok(b)
    }

    /// Matrix whose rows are `b(t)^T` for each `t`.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.dim());
        for (row, &t) in times.iter().enumerate() {
            let (start, vals) = self.eval_nonzero(t)?;
            for (k, v) in vals.into_iter().enumerate() {
                m[(row, start + k)] = v;
            }
        }
        Ok(m)
    }
}

/// Places `n_interior` knots at equally spaced quantiles of the pooled times.
///
/// Tied quantiles are pushed apart by a fraction of the smallest gap between
/// distinct observed times so the knot sequence stays strictly increasing.
pub fn make_basis(times: &[f64], n_interior: usize, order: usize) -> Result<SplineBasis> {
    if n_interior < 1 {
        return Err(FaceError::InvalidInput("need at least one interior knot".into()));
    }
    if times.is_empty() {
        return Err(FaceError::InvalidInput("no observation times".into()));
    }
    if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(FaceError::OutOfDomain { value: t });
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_interior {
        return Err(FaceError::TooFewDistinctTimes {
            distinct: distinct.len(),
            requested: n_interior,
        });
    }
    let min_gap = distinct
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    let eps = min_gap / (n_interior + 1) as f64;

    let mut knots: Vec<f64> = (1..=n_interior)
        .map(|k| quantile_sorted(&sorted, k as f64 / (n_interior + 1) as f64))
        .collect();
    let mut prev = 0.0;
    for k in knots.iter_mut() {
        if *k <= prev {
            *k = prev + eps;
        }
        prev = *k;
    }
    let mut next = 1.0;
    for k in knots.iter_mut().rev() {
        if *k >= next {
            *k = next - eps;
        }
        next = *k;
    }
    SplineBasis::from_interior_knots(knots, order).map_err(|_| FaceError::TooFewDistinctTimes {
        distinct: distinct.len(),
        requested: n_interior,
    })
}

/// Second-order difference matrix `D` (`c x (c-2)`); `D^T theta` has entries
/// `theta_k - 2 theta_{k+1} + theta_{k+2}`.
pub fn difference_matrix(c: usize) -> Result<DMatrix<f64>> {
    if c < 3 {
        return Err(FaceError::InvalidInput(format!(
            "difference matrix needs c >= 3, got {c}"
        )));
    }
    let mut d = DMatrix::zeros(c, c - 2);
    for k in 0..c - 2 {
        d[(k, k)] = 1.0;
        d[(k + 1, k)] = -2.0;
        d[(k + 2, k)] = 1.0;
    }
    Ok(d)
}

/// Length of `vech` of a `c x c` matrix.
pub fn vech_len(c: usize) -> usize {
    c * (c + 1) / 2
}

/// Position of entry `(row, col)` with `row >= col` in the lower-triangle,
/// column-major `vech` stacking.
pub fn vech_index(row: usize, col: usize, c: usize) -> usize {
    let (row, col) = if row >= col { (row, col) } else { (col, row) };
    col * (2 * c + 1 - col) / 2 + (row - col)
}

pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let c = m.nrows();
    let mut v = DVector::zeros(vech_len(c));
    let mut k = 0;
    for col in 0..c {
        for row in col..c {
            v[k] = m[(row, col)];
            k += 1;
        }
    }
    v
}

/// Inverse of [`vech`] for symmetric matrices.
pub fn unvech(v: &DVector<f64>, c: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(c, c);
    let mut k = 0;
    for col in 0..c {
        for row in col..c {
            m[(row, col)] = v[k];
            m[(col, row)] = v[k];
            k += 1;
        }
    }
    m
}

/// Duplication matrix `G_c` (`c^2 x c(c+1)/2`) with `G_c vech(Theta) = vec(Theta)`.
pub fn duplication_matrix(c: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(c * c, vech_len(c));
    for col in 0..c {
        for row in 0..c {
            g[(col * c + row, vech_index(row, col, c))] = 1.0;
        }
    }
    g
}

/// Difference, duplication and penalty matrices for a basis of dimension `c`.
#[derive(Debug, Clone)]
pub struct PenaltyMatrices {
    pub d: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl PenaltyMatrices {
    pub fn new(c: usize) -> Result<Self> {
        let d = difference_matrix(c)?;
        let g = duplication_matrix(c);
        let p = penalty_p(&d, &g);
        let q = embed_q(&p);
        Ok(Self { d, g, p, q })
    }
}

/// `P = G_c^T (I_c kron D D^T) G_c`, so that `vech(Theta)^T P vech(Theta)`
/// equals `tr(Theta D D^T Theta^T)` for symmetric `Theta`.
pub fn penalty_p(d: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let c = d.nrows();
    let ddt = d * d.transpose();
    let block = DMatrix::<f64>::identity(c, c).kronecker(&ddt);
    let mut p = g.transpose() * block * g;
    crate::linalg::symmetrize(&mut p);
    p
}

/// Block-diagonal `Q = diag(P, 0)`; the trailing coordinate is the noise variance.
pub fn embed_q(p: &DMatrix<f64>) -> DMatrix<f64> {
    let q = p.nrows();
    let mut out = DMatrix::zeros(q + 1, q + 1);
    out.view_mut((0, 0), (q, q)).copy_from(p);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::unit_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0));
        &a + a.transpose()
    }

    #[test]
    fn uniform_quantile_knots() {
        let times = unit_grid(1001);
        let b = make_basis(&times, 3, 4).unwrap();
        assert_eq!(b.dim(), 7);
        for (k, want) in b.interior_knots().iter().zip([0.25, 0.5, 0.75]) {
            assert!((k - want).abs() < 1e-12);
        }
        assert_eq!(make_basis(&times, 10, 4).unwrap().dim(), 14);
    }

    #[test]
    fn single_knot_is_the_median() {
        let times = [0.05, 0.1, 0.2, 0.33, 0.5];
        let b = make_basis(&times, 1, 4).unwrap();
        assert_eq!(b.interior_knots(), &[0.2]);
    }

    #[test]
    fn tied_quantiles_are_separated() {
        let mut times = vec![0.3; 50];
        times.extend([0.1, 0.6, 0.9]);
        let b = make_basis(&times, 3, 4).unwrap();
        let k = b.interior_knots();
        assert!(k.windows(2).all(|w| w[0] < w[1]));
        assert!(k.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn too_few_distinct_times() {
        let err = make_basis(&[0.2, 0.2, 0.4], 3, 4).unwrap_err();
        assert!(matches!(err, FaceError::TooFewDistinctTimes { distinct: 2, requested: 3 }));
    }

    #[test]
    fn boundary_values() {
        let b = make_basis(&unit_grid(50), 5, 4).unwrap();
        let b0 = b.eval(0.0).unwrap();
        let b1 = b.eval(1.0).unwrap();
        assert_eq!(b0[0], 1.0);
        assert_eq!(b0.sum(), 1.0);
        assert_eq!(b1[b.dim() - 1], 1.0);
        assert_eq!(b1.sum(), 1.0);
        assert!(b.eval(1.0 + 1e-9).is_err());
        assert!(b.eval(-1e-9).is_err());
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        for order in [2, 3, 4, 5] {
            let b = make_basis(&[0.01, 0.2, 0.25, 0.4, 0.7, 0.71, 0.9], 4, order).unwrap();
            for t in unit_grid(1001) {
                let v = b.eval(t).unwrap();
                assert!((v.sum() - 1.0).abs() < 1e-10, "order {order} t {t}");
                assert!(v.iter().all(|&x| x >= -1e-14));
                assert!(v.iter().filter(|&&x| x != 0.0).count() <= order);
            }
        }
    }

    #[test]
    fn difference_matrix_examples() {
        let d = difference_matrix(4).unwrap();
        let want = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
        assert_eq!(d.transpose(), want);
        let d = difference_matrix(8).unwrap();
        let constant = DVector::from_element(8, 3.0);
        let linear = DVector::from_fn(8, |k, _| 2.0 * k as f64 - 1.0);
        assert_eq!(d.transpose() * constant, DVector::zeros(6));
        assert_eq!(d.transpose() * linear, DVector::zeros(6));
        assert!(difference_matrix(2).is_err());
        // null space of D^T is two-dimensional
        let sv = d.transpose().singular_values();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-10).count(), 6);
    }

    #[test]
    fn duplication_matrix_examples() {
        let g2 = duplication_matrix(2);
        let want = DMatrix::from_row_slice(4, 3, &[1., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(g2, want);
        assert_eq!(duplication_matrix(1), DMatrix::from_element(1, 1, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_symmetric(3, &mut rng);
        let vec_theta = DVector::from_column_slice(theta.as_slice());
        assert_eq!(duplication_matrix(3) * vech(&theta), vec_theta);
        assert_eq!(unvech(&vech(&theta), 3), theta);
    }

    #[test]
    fn vech_index_matches_stacking() {
        for c in 1..7 {
            let mut k = 0;
            for col in 0..c {
                for row in col..c {
                    assert_eq!(vech_index(row, col, c), k);
                    assert_eq!(vech_index(col, row, c), k);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn penalty_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c in [3, 5, 8] {
            let pm = PenaltyMatrices::new(c).unwrap();
            let ddt = &pm.d * pm.d.transpose();
            for _ in 0..20 {
                let theta = random_symmetric(c, &mut rng);
                let v = vech(&theta);
                let lhs = (v.transpose() * &pm.p * &v)[0];
                let rhs = (&theta * &ddt * theta.transpose()).trace();
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0), "c={c}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn penalty_is_psd_and_ignores_noise_coordinate() {
        let pm = PenaltyMatrices::new(8).unwrap();
        assert_eq!(pm.p, pm.p.transpose());
        let eig = pm.p.clone().symmetric_eigen().eigenvalues;
        let max = eig.max();
        assert!(eig.min() >= -1e-10 * max);

        let q = pm.q.nrows();
        assert!(pm.q.row(q - 1).iter().all(|&x| x == 0.0));
        assert!(pm.q.column(q - 1).iter().all(|&x| x == 0.0));
        let mut alpha = DVector::from_element(q, 0.3);
        let base = (alpha.transpose() * &pm.q * &alpha)[0];
        alpha[q - 1] = 17.0;
        assert_eq!((alpha.transpose() * &pm.q * &alpha)[0], base);

        // constant rows carry no penalty
        let theta = DMatrix::from_element(8, 8, 2.5);
        let v = vech(&theta);
        assert!((v.transpose() * &pm.p * &v)[0].abs() < 1e-10);
    }
}
