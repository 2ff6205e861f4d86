//! Conditional-Gaussian prediction of a subject's curve at new times.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::SubjectRecord;
use crate::error::{FaceError, Result};
use crate::linalg::{sorted_eigen, symmetrize};
use crate::solver::FitResult;
use crate::splines::SplineBasis;

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Fitted pieces needed for prediction.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub basis: &'a SplineBasis,
    pub theta: &'a DMatrix<f64>,
    pub sigma2: f64,
    pub mean: &'a dyn Fn(f64) -> f64,
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub new_times: Vec<f64>,
    pub x_hat: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub band_lo: DVector<f64>,
    pub band_hi: DVector<f64>,
}

/// Conditional mean and covariance of the curve at `new_times` given the
/// subject's observations. With `latent`, the noise term is left out of the
/// new-time block so bands cover the smooth curve rather than new readings.
pub fn predict_subject(
    model: Model<'_>,
    record: &SubjectRecord,
    new_times: &[f64],
    latent: bool,
) -> Result<PredictionResult> {
    if let Some(&t) = new_times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(FaceError::OutOfDomain { value: t });
    }
    let h_o = model.basis.design_matrix(&record.times)?;
    let h_n = model.basis.design_matrix(new_times)?;
    let m = record.len();
    let mut v = &h_o * model.theta * h_o.transpose();
    for k in 0..m {
        v[(k, k)] += model.sigma2;
    }
    symmetrize(&mut v);
    repair(&mut v);
    let chol = Cholesky::new(v)
        .ok_or_else(|| FaceError::Singular("observed-block covariance is singular".into()))?;

    let cross = &h_n * model.theta * h_o.transpose();
    let resid = DVector::from_iterator(
        m,
        record.times.iter().zip(&record.values).map(|(&t, &y)| y - (model.mean)(t)),
    );
    let mean_new = DVector::from_iterator(new_times.len(), new_times.iter().map(|&t| (model.mean)(t)));
    let x_hat = &cross * chol.solve(&resid) + mean_new;

    let mut v_new = &h_n * model.theta * h_n.transpose();
    if !latent {
        for k in 0..new_times.len() {
            v_new[(k, k)] += model.sigma2;
        }
    }
    let mut cov = v_new - &cross * chol.solve(&cross.transpose());
    symmetrize(&mut cov);
    let mut out = PredictionResult {
        new_times: new_times.to_vec(),
        band_lo: x_hat.clone(),
        band_hi: x_hat.clone(),
        x_hat,
        cov,
    };
    confidence_bands(&mut out, DEFAULT_LEVEL)?;
    Ok(out)
}

/// Convenience wrapper using a fit's own mean, surface and noise variance.
pub fn predict_from_fit(
    fit: &FitResult,
    record: &SubjectRecord,
    new_times: &[f64],
    latent: bool,
) -> Result<PredictionResult> {
    let mean = |t: f64| fit.mean_fit.eval(t);
    let model = Model { basis: &fit.basis, theta: &fit.theta, sigma2: fit.sigma2, mean: &mean };
    predict_subject(model, record, new_times, latent)
}

/// Lifts the spectrum so the smallest eigenvalue is at least
/// `1e-8 * trace / m`.
fn repair(v: &mut DMatrix<f64>) {
    let m = v.nrows();
    let eps = 1e-8 * v.trace().abs() / m as f64;
    let (vals, _) = sorted_eigen(v);
    let min = vals[m - 1];
    if min < eps {
        let shift = eps - min;
        for k in 0..m {
            v[(k, k)] += shift;
        }
    }
}

/// Pointwise normal bands `x_hat ± z sqrt(diag cov)`.
pub fn confidence_bands(pred: &mut PredictionResult, level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FaceError::InvalidInput(format!("band level {level} is not in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    for k in 0..pred.x_hat.len() {
        let half = z * pred.cov[(k, k)].max(0.0).sqrt();
        pred.band_lo[k] = pred.x_hat[k] - half;
        pred.band_hi[k] = pred.x_hat[k] + half;
    }
    Ok(())
}
