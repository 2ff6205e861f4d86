//! Integrated squared errors on an equispaced unit grid.

use nalgebra::{DMatrix, DVector};

use crate::error::{FaceError, Result};

/// `∫∫ (C_est - C_true)^2` with weight `1/G^2`.
pub fn ise_covariance(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if est.shape() != truth.shape() || !est.is_square() {
        return Err(FaceError::Dimension(format!(
            "covariance grids differ: {:?} vs {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let g = est.nrows() as f64;
    Ok((est - truth).norm_squared() / (g * g))
}

/// `min(∫(psi - psi_hat)^2, ∫(psi + psi_hat)^2)` with weight `1/G`.
pub fn ise_eigenfunction(psi_hat: &DVector<f64>, psi: &DVector<f64>) -> Result<f64> {
    if psi_hat.len() != psi.len() {
        return Err(FaceError::Dimension(format!(
            "eigenfunction grids differ: {} vs {}",
            psi_hat.len(),
            psi.len()
        )));
    }
    let g = psi.len() as f64;
    let minus = (psi - psi_hat).norm_squared() / g;
    let plus = (psi + psi_hat).norm_squared() / g;
    Ok(minus.min(plus))
}

pub fn se_eigenvalue(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).powi(2)
}
