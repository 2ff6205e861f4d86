//! Grid evaluation of a covariance surface and its quadrature eigendecomposition.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{sorted_eigen, symmetrize};
#[cfg(test)]
use crate::linalg::unit_grid;
use crate::splines::SplineBasis;

pub const DEFAULT_GRID: usize = 101;

/// Cell midpoints `(k + 1/2) / G` of `G` equal cells on `[0, 1]`.
pub fn quadrature_grid(count: usize) -> Vec<f64> {
    let g = count as f64;
    (0..count).map(|k| (k as f64 + 0.5) / g).collect()
}

/// Eigenvalues and eigenfunctions on an equispaced grid, normalized so that
/// `(1/G) Psi^T Psi = I`.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub grid: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: DMatrix<f64>,
    /// Full spectrum of `C / G` before trimming, descending.
    pub raw_eigenvalues: Vec<f64>,
}

impl EigenResult {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// `b(grid_a)^T Theta b(grid_b)` for all pairs, exactly symmetric.
pub fn eval_cov_grid(basis: &SplineBasis, theta: &DMatrix<f64>, grid: &[f64]) -> Result<DMatrix<f64>> {
    let b = basis.design_matrix(grid)?;
    let mut c = &b * theta * b.transpose();
    symmetrize(&mut c);
    Ok(c)
}

/// Evaluates an arbitrary covariance function on the grid.
pub fn tabulate<F: Fn(f64, f64) -> f64>(cov: F, grid: &[f64]) -> DMatrix<f64> {
    let g = grid.len();
    let mut c = DMatrix::from_fn(g, g, |a, b| cov(grid[a], grid[b]));
    symmetrize(&mut c);
    c
}

pub fn eigendecompose(c_grid: &DMatrix<f64>, grid: &[f64], trim_negative: bool) -> EigenResult {
    let g = grid.len();
    let mut scaled = c_grid / g as f64;
    symmetrize(&mut scaled);
    let (vals, vecs) = sorted_eigen(&scaled);
    let raw: Vec<f64> = vals.iter().copied().collect();
    let keep = if trim_negative { raw.iter().take_while(|&&v| v > 0.0).count() } else { g };
    let root = (g as f64).sqrt();
    let mut psi = DMatrix::zeros(g, keep);
    for k in 0..keep {
        let mut col: DVector<f64> = vecs.column(k) * root;
        let lead = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            col.neg_mut();
        }
        psi.set_column(k, &col);
    }
    EigenResult {
        grid: grid.to_vec(),
        eigenvalues: raw[..keep].to_vec(),
        eigenfunctions: psi,
        raw_eigenvalues: raw,
    }
}

/// Eigendecomposition of a fitted surface on the quadrature grid.
pub fn fitted_eigen(basis: &SplineBasis, theta: &DMatrix<f64>, g: usize) -> Result<EigenResult> {
    let grid = quadrature_grid(g);
    Ok(eigendecompose(&eval_cov_grid(basis, theta, &grid)?, &grid, true))
}
