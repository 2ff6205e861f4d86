//! Leave-one-subject-out criteria for the smoothing parameter.
//!
//! With `F_i = X_i A` and `d = 1 / (1 + lambda s)`, the generalized criterion
//!
//! ```text
//! ||C - S C||^2 + 2 sum_i (S_i C - C_i)^T S_ii (S_i C - C_i)
//! ```
//!
//! expands into a fixed set of vectors and matrices contracted against `d`,
//! so each grid point costs `O(p^3)` regardless of the number of products.
//! `S_ii = F_i D F_i^T W_i` is only symmetric when `W_i = I`; the cross term
//! then splits into two pieces, `g1` and `g1_cross`, which coincide under
//! identity weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{FaceError, Result};
use crate::linalg::symmetrize;
use crate::solver::{Block, Diagonalization, Weights};

/// Row `r` of the output is `a.row(r) ⊗ b.row(r)`.
pub fn row_khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(FaceError::Dimension(format!(
            "row-wise Khatri-Rao needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.ncols();
    Ok(DMatrix::from_fn(a.nrows(), k * k, |r, col| a[(r, col / k)] * b[(r, col % k)]))
}

/// Lambda-free pieces of the generalized criterion.
#[derive(Debug, Clone)]
pub struct GcvPrecomp {
    pub norm_c2: f64,
    /// `F^T C`.
    pub f: DVector<f64>,
    /// `F^T W C`.
    pub f_tilde: DVector<f64>,
    pub ftf: DMatrix<f64>,
    /// `sum_i J_i ∘ f_i`.
    pub g: DVector<f64>,
    /// `sum_i diag(J_i) F_i^T F_i diag(f_tilde)`.
    pub g1: DMatrix<f64>,
    /// `sum_i diag(f_i) L_i diag(f_tilde)`.
    pub g1_cross: DMatrix<f64>,
    /// `sum_i L_i ⊙ F_i^T F_i`, `p x p^2`.
    pub g2: DMatrix<f64>,
}

struct BlockTerms {
    f: DVector<f64>,
    j: DVector<f64>,
    ftf: DMatrix<f64>,
    l: Option<DMatrix<f64>>,
    norm2: f64,
}

impl BlockTerms {
    fn l(&self) -> &DMatrix<f64> {
        self.l.as_ref().unwrap_or(&self.ftf)
    }
}

pub fn precompute(blocks: &[Block], weights: &Weights, diag: &Diagonalization) -> GcvPrecomp {
    let p = diag.a.ncols();
    let terms: Vec<BlockTerms> = blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let fi = &b.x * &diag.a;
            let f = fi.transpose() * &b.y;
            let mut ftf = fi.transpose() * &fi;
            symmetrize(&mut ftf);
            let (j, l) = if weights.is_identity() {
                (f.clone(), None)
            } else {
                let wf = weights.weigh(i, &fi);
                let mut l = fi.transpose() * &wf;
                symmetrize(&mut l);
                (wf.transpose() * &b.y, Some(l))
            };
            BlockTerms { f, j, ftf, l, norm2: b.y.norm_squared() }
        })
        .collect();

    let mut pre = GcvPrecomp {
        norm_c2: 0.0,
        f: DVector::zeros(p),
        f_tilde: DVector::zeros(p),
        ftf: DMatrix::zeros(p, p),
        g: DVector::zeros(p),
        g1: DMatrix::zeros(p, p),
        g1_cross: DMatrix::zeros(p, p),
        g2: DMatrix::zeros(p, 0),
    };
    for t in &terms {
        pre.norm_c2 += t.norm2;
        pre.f += &t.f;
        pre.f_tilde += &t.j;
        pre.ftf += &t.ftf;
        pre.g += t.j.component_mul(&t.f);
        for c in 0..p {
            for r in 0..p {
                pre.g1[(r, c)] += t.j[r] * t.ftf[(r, c)];
                pre.g1_cross[(r, c)] += t.f[r] * t.l()[(r, c)];
            }
        }
    }
    symmetrize(&mut pre.ftf);
    for c in 0..p {
        let ft = pre.f_tilde[c];
        pre.g1.column_mut(c).scale_mut(ft);
        pre.g1_cross.column_mut(c).scale_mut(ft);
    }

    // L_i and F_i^T F_i are symmetric, so their rows are read as contiguous columns
    let rows: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|r| {
            let mut row = vec![0.0; p * p];
            for t in &terms {
                let l = t.l().column(r);
                let ftf = t.ftf.column(r);
                let ftf = ftf.as_slice();
                for (a, &la) in l.iter().enumerate() {
                    if la == 0.0 {
                        continue;
                    }
                    for (v, &x) in row[a * p..(a + 1) * p].iter_mut().zip(ftf) {
                        *v += la * x;
                    }
                }
            }
            row
        })
        .collect();
    pre.g2 = DMatrix::from_fn(p, p * p, |r, k| rows[r][k]);
    pre
}

/// Generalized criterion at `lambda` from the precomputed pieces.
pub fn igcv_value(pre: &GcvPrecomp, s: &DVector<f64>, lambda: f64) -> f64 {
    let p = s.len();
    let d = s.map(|s| 1.0 / (1.0 + lambda * s));
    let v = pre.f_tilde.component_mul(&d);
    let vv = DVector::from_fn(p * p, |k, _| v[k / p] * v[k % p]);
    let fit = pre.norm_c2 - 2.0 * d.dot(&pre.f_tilde.component_mul(&pre.f))
        + v.dot(&(&pre.ftf * &v));
    let cross = (&pre.g1 + &pre.g1_cross) * &d;
    fit + 2.0 * d.dot(&pre.g) - 2.0 * d.dot(&cross) + 2.0 * d.dot(&(&pre.g2 * vv))
}

/// Exact leave-one-subject-out error
/// `sum_i ||(I - S_ii)^{-1} (S_i C - C_i)||^2` with the smoother of
/// `X^T W X + ridge I + lambda Q`, evaluated through its diagonal form.
pub fn exact_icv(
    blocks: &[Block],
    weights: &Weights,
    q: &DMatrix<f64>,
    lambda: f64,
    ridge: f64,
) -> Result<f64> {
    let cp = crate::solver::cross_products(blocks, weights);
    let diag = crate::solver::diagonalize_with_ridge(&cp.xtwx, q, ridge)?;
    IcvCache::new(blocks, weights, &diag).value(lambda)
}

fn leave_out_residual(s_ii: DMatrix<f64>, resid: DVector<f64>) -> Result<DVector<f64>> {
    let n = s_ii.nrows();
    let lhs = DMatrix::identity(n, n) - s_ii;
    lhs.lu()
        .solve(&resid)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .ok_or_else(|| FaceError::Singular("I - S_ii is singular; one subject dominates the fit".into()))
}

/// Lambda-free pieces for evaluating the exact criterion on a whole grid.
pub struct IcvCache<'a> {
    blocks: &'a [Block],
    s: DVector<f64>,
    f_blocks: Vec<DMatrix<f64>>,
    wf_blocks: Vec<DMatrix<f64>>,
    f_tilde: DVector<f64>,
}

impl<'a> IcvCache<'a> {
    pub fn new(blocks: &'a [Block], weights: &Weights, diag: &Diagonalization) -> Self {
        let f_blocks = diag.f_blocks(blocks);
        let wf_blocks: Vec<DMatrix<f64>> =
            f_blocks.iter().enumerate().map(|(i, f)| weights.weigh(i, f)).collect();
        let mut f_tilde = DVector::zeros(diag.a.ncols());
        for (wf, b) in wf_blocks.iter().zip(blocks) {
            f_tilde += wf.transpose() * &b.y;
        }
        Self { blocks, s: diag.s.clone(), f_blocks, wf_blocks, f_tilde }
    }

    pub fn value(&self, lambda: f64) -> Result<f64> {
        let d = self.s.map(|s| 1.0 / (1.0 + lambda * s));
        let coef = self.f_tilde.component_mul(&d);
        let mut total = 0.0;
        for ((f, wf), b) in self.f_blocks.iter().zip(&self.wf_blocks).zip(self.blocks) {
            let mut fd = f.clone();
            for (k, mut col) in fd.column_iter_mut().enumerate() {
                col.scale_mut(d[k]);
            }
            let s_ii = fd * wf.transpose();
            total += leave_out_residual(s_ii, f * &coef - &b.y)?.norm_squared();
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{cross_products, diagonalize};
    use crate::splines::PenaltyMatrices;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn khatri_rao_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(row_khatri_rao(&a, &a).unwrap().as_slice(), &[1.0, 2.0, 2.0, 4.0]);
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_element(2, 2, 1.0);
        let out = row_khatri_rao(&a, &b).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]));
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DMatrix::from_column_slice(3, 1, &[4.0, 5.0, 6.0]);
        assert_eq!(row_khatri_rao(&x, &y).unwrap().as_slice(), &[4.0, 10.0, 18.0]);
        assert!(row_khatri_rao(&x, &a).is_err());
    }

    fn instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Block>, Weights, DMatrix<f64>) {
        let p = 7;
        let blocks: Vec<Block> = (0..n)
            .map(|_| {
                let rows = rng.random_range(1..=6);
                Block {
                    x: DMatrix::from_fn(rows, p, |_, _| rng.random_range(-1.0..1.0)),
                    y: DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0)),
                }
            })
            .collect();
        let ws = blocks
            .iter()
            .map(|b| {
                let m = b.y.len();
                let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
                &a * a.transpose() + DMatrix::identity(m, m)
            })
            .collect();
        (blocks, Weights::PerBlock(ws), PenaltyMatrices::new(3).unwrap().q)
    }

    #[test]
    fn single_subject_identity_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (blocks, _, q) = instance(&mut rng, 1);
        let cp = cross_products(&blocks, &Weights::Identity);
        let dg = diagonalize(&cp.xtwx, &q).unwrap();
        let pre = precompute(&blocks, &Weights::Identity, &dg);
        assert!((&pre.g - pre.f.component_mul(&pre.f)).amax() < 1e-12);
        let expect = (&pre.f * pre.f.transpose()).component_mul(&pre.ftf);
        assert!((&pre.g1 - &expect).amax() < 1e-12);
        assert_eq!(pre.g1, pre.g1_cross);
        assert!((&pre.g2 - row_khatri_rao(&pre.ftf, &pre.ftf).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn duplicated_subjects_double_every_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (blocks, weights, q) = instance(&mut rng, 3);
        let Weights::PerBlock(ws) = &weights else { unreachable!() };
        let cp = cross_products(&blocks, &weights);
        let dg = diagonalize(&cp.xtwx, &q).unwrap();
        let one = precompute(&blocks, &weights, &dg);
        let doubled: Vec<Block> = blocks.iter().chain(&blocks).cloned().collect();
        let w2 = Weights::PerBlock(ws.iter().chain(ws).cloned().collect());
        let two = precompute(&doubled, &w2, &dg);
        assert!((two.norm_c2 - 2.0 * one.norm_c2).abs() < 1e-12);
        assert!((&two.f - &one.f * 2.0).amax() < 1e-10);
        assert!((&two.g - &one.g * 2.0).amax() < 1e-10);
        assert!((&two.g2 - &one.g2 * 2.0).amax() < 1e-9);
        // g1 also picks up the doubled f_tilde
        assert!((&two.g1 - &one.g1 * 4.0).amax() < 1e-9);
    }

    #[test]
    fn exact_icv_for_one_subject_is_the_response_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 4;
        let x = DMatrix::from_fn(6, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let blocks = vec![Block { x, y: y.clone() }];
        let q = DMatrix::identity(p, p);
        let v = exact_icv(&blocks, &Weights::Identity, &q, 0.5, 0.0).unwrap();
        assert!((v - y.norm_squared()).abs() < 1e-9 * y.norm_squared());
    }

    #[test]
    fn exact_icv_matches_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (blocks, weights, q) = instance(&mut rng, 6);
        let cp = cross_products(&blocks, &weights);
        let dg = diagonalize(&cp.xtwx, &q).unwrap();
        let cache = IcvCache::new(&blocks, &weights, &dg);
        let mut prob = crate::oracle::DenseProblem::from_blocks(&blocks, &weights, &q).unwrap();
        prob.ridge = dg.ridge;
        for lambda in [0.01, 1.0, 100.0] {
            let a = cache.value(lambda).unwrap();
            let b = crate::oracle::refit_icv(&prob, lambda).unwrap();
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }
}
