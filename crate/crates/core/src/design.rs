//! Raw covariance products and the linear design linking them to
//! `alpha = (vech(Theta), sigma^2)`.

use nalgebra::{DMatrix, DVector};

use crate::dataset::SparseFunctionalDataset;
use crate::error::Result;
use crate::solver::Block;
use crate::splines::{vech_index, vech_len, SplineBasis};

/// Product pairs `(j1, j2)` with `j1 <= j2` in stacking order
/// `(0,0), (0,1), ..., (0,m-1), (1,1), ...`.
pub fn pair_index(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|j| (j..m).map(move |k| (j, k))).collect()
}

/// Raw products `r_{j1} r_{j2}` of residuals from `mean`, one vector per subject.
pub fn raw_covariances<F>(ds: &SparseFunctionalDataset, mean: F) -> Vec<DVector<f64>>
where
    F: Fn(f64) -> f64,
{
    ds.subjects()
        .iter()
        .map(|s| {
            let r: Vec<f64> = s.times.iter().zip(&s.values).map(|(&t, &y)| y - mean(t)).collect();
            products(&r)
        })
        .collect()
}

/// Stacked products of one residual vector.
pub fn products(r: &[f64]) -> DVector<f64> {
    let pairs = pair_index(r.len());
    DVector::from_iterator(pairs.len(), pairs.iter().map(|&(a, b)| r[a] * r[b]))
}

/// Per-subject blocks `X_i = [B_i G_c | delta_i]` with responses `C_hat_i`.
#[derive(Debug, Clone)]
pub struct Design {
    pub blocks: Vec<Block>,
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub c: usize,
}

/// Borrowed view of one subject's part of a [`Design`].
#[derive(Debug, Clone, Copy)]
pub struct SubjectDesign<'a> {
    pub c_hat: &'a DVector<f64>,
    pub x: &'a DMatrix<f64>,
    pub pairs: &'a [(usize, usize)],
}

impl SubjectDesign<'_> {
    /// 0/1 indicator of diagonal products.
    pub fn delta(&self) -> DVector<f64> {
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(a, b)| f64::from(a == b)))
    }
}

impl Design {
    pub fn n_subjects(&self) -> usize {
        self.blocks.len()
    }

    pub fn subject(&self, i: usize) -> SubjectDesign<'_> {
        SubjectDesign { c_hat: &self.blocks[i].y, x: &self.blocks[i].x, pairs: &self.pairs[i] }
    }

    /// Number of parameters, `c(c+1)/2 + 1`.
    pub fn n_params(&self) -> usize {
        vech_len(self.c) + 1
    }

    /// Total number of raw products `N`.
    pub fn n_total(&self) -> usize {
        self.blocks.iter().map(|b| b.y.len()).sum()
    }

    pub fn stacked_x(&self) -> DMatrix<f64> {
        stack_rows(self.blocks.iter().map(|b| &b.x), self.n_params())
    }

    pub fn stacked_c(&self) -> DVector<f64> {
        let all: Vec<f64> = self.blocks.iter().flat_map(|b| b.y.iter().copied()).collect();
        DVector::from_vec(all)
    }
}

pub(crate) fn stack_rows<'a>(
    parts: impl Iterator<Item = &'a DMatrix<f64>> + Clone,
    ncols: usize,
) -> DMatrix<f64> {
    let n: usize = parts.clone().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(n, ncols);
    let mut row = 0;
    for m in parts {
        out.view_mut((row, 0), (m.nrows(), ncols)).copy_from(m);
        row += m.nrows();
    }
    out
}

/// One design row for the product of observations at `t1` and `t2`.
pub fn design_row(basis: &SplineBasis, t1: f64, t2: f64, diagonal: bool) -> Result<DVector<f64>> {
    let c = basis.dim();
    let mut row = DVector::zeros(vech_len(c) + 1);
    fill_row(basis, t1, t2, diagonal, row.as_mut_slice())?;
    Ok(row)
}

fn fill_row(basis: &SplineBasis, t1: f64, t2: f64, diagonal: bool, out: &mut [f64]) -> Result<()> {
    let c = basis.dim();
    let (s1, v1) = basis.eval_nonzero(t1)?;
    let (s2, v2) = basis.eval_nonzero(t2)?;
    // (k, l) and (l, k) land on the same vech slot, which realises the G_c collapse
    for (a, &va) in v1.iter().enumerate() {
        for (b, &vb) in v2.iter().enumerate() {
            out[vech_index(s1 + a, s2 + b, c)] += va * vb;
        }
    }
    out[vech_len(c)] = f64::from(diagonal);
    Ok(())
}

/// Builds the per-subject design blocks for raw products `c_hat`
/// (as returned by [`raw_covariances`]).
pub fn build_design(
    ds: &SparseFunctionalDataset,
    basis: &SplineBasis,
    c_hat: Vec<DVector<f64>>,
) -> Result<Design> {
    let c = basis.dim();
    let p = vech_len(c) + 1;
    let mut blocks = Vec::with_capacity(ds.n());
    let mut all_pairs = Vec::with_capacity(ds.n());
    for (s, y) in ds.subjects().iter().zip(c_hat) {
        let pairs = pair_index(s.len());
        debug_assert_eq!(pairs.len(), y.len());
        let mut x = DMatrix::zeros(pairs.len(), p);
        let mut row = vec![0.0; p];
        for (r, &(j1, j2)) in pairs.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            fill_row(basis, s.times[j1], s.times[j2], j1 == j2, &mut row)?;
            for (k, v) in row.iter().enumerate() {
                x[(r, k)] = *v;
            }
        }
        blocks.push(Block { x, y });
        all_pairs.push(pairs);
    }
    Ok(Design { blocks, pairs: all_pairs, c })
}
