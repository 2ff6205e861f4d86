//! Covariance of the raw products under Gaussianity and the blended GLS
//! weight matrices built from it.

use nalgebra::{Cholesky, DMatrix};

use crate::dataset::SparseFunctionalDataset;
use crate::design::pair_index;
use crate::error::{FaceError, Result};
use crate::linalg::{sorted_eigen, symmetrize};
use crate::splines::SplineBasis;

pub const DEFAULT_BETA: f64 = 0.05;

/// Blend constant and the per-subject weight matrices `W_i`.
#[derive(Debug, Clone)]
pub struct WeightSpec {
    pub beta: f64,
    pub per_subject_w: Vec<DMatrix<f64>>,
}

/// `Cov(C_hat_i)` for a subject observed at `times`, given the working
/// covariance function and noise variance.
///
/// Entry for pairs `(j, j')` and `(k, k')`:
///
/// ```text
/// C(j,k)C(j',k') + C(j,k')C(j',k)
///   + d(j,k)d(j',k') s^4 + d(j,k')d(j',k) s^4
///   + C(j,k)d(j',k') s^2 + C(j,k')d(j',k) s^2 + C(j',k)d(j,k') s^2 + C(j',k')d(j,k) s^2
/// ```
///
/// where `d` is the Kronecker delta on observation indices and `s^2` the noise
/// variance.
pub fn covariance_of_products<F>(cov: F, sigma2: f64, times: &[f64]) -> DMatrix<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let m = times.len();
    let c = DMatrix::from_fn(m, m, |a, b| cov(times[a], times[b]));
    covariance_of_products_matrix(&c, sigma2)
}

/// As [`covariance_of_products`], with the working covariance already
/// evaluated at the subject's observation times.
pub fn covariance_of_products_matrix(c: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let pairs = pair_index(c.nrows());
    let s4 = sigma2 * sigma2;
    let d = |a: usize, b: usize| f64::from(a == b);
    let n = pairs.len();
    let mut out = DMatrix::zeros(n, n);
    for (r, &(j, jp)) in pairs.iter().enumerate() {
        for (s, &(k, kp)) in pairs.iter().enumerate().skip(r) {
            let v = c[(j, k)] * c[(jp, kp)]
                + c[(j, kp)] * c[(jp, k)]
                + d(j, k) * d(jp, kp) * s4
                + d(j, kp) * d(jp, k) * s4
                + c[(j, k)] * d(jp, kp) * sigma2
                + c[(j, kp)] * d(jp, k) * sigma2
                + c[(jp, k)] * d(j, kp) * sigma2
                + c[(jp, kp)] * d(j, k) * sigma2;
            out[(r, s)] = v;
            out[(s, r)] = v;
        }
    }
    out
}

/// `W = [(1 - beta) V + beta diag(diag(V))]^{-1}` for `V = Cov(C_hat_i)`.
pub fn blend_weights(cov: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if let Some(k) = (0..n).find(|&k| cov[(k, k)] <= 0.0 || !cov[(k, k)].is_finite()) {
        return Err(FaceError::InvalidInput(format!(
            "covariance of products has non-positive diagonal entry {} at {k}",
            cov[(k, k)]
        )));
    }
    let mut blended = cov * (1.0 - beta);
    for k in 0..n {
        blended[(k, k)] = cov[(k, k)];
    }
    let chol = Cholesky::new(blended).ok_or_else(|| {
        FaceError::Singular("blended covariance of products is not positive definite".into())
    })?;
    let mut w = chol.inverse();
    symmetrize(&mut w);
    Ok(w)
}

/// Plug-in weights for every subject from a working fit `(Theta, sigma2)`.
///
/// The working covariance at each subject's times is projected onto the PSD
/// cone first; an unconstrained `Theta` can be indefinite, and the products of
/// a Gaussian vector only have a valid covariance when that vector does.
pub fn working_weights(
    ds: &SparseFunctionalDataset,
    basis: &SplineBasis,
    theta: &DMatrix<f64>,
    sigma2: f64,
    beta: f64,
) -> Result<WeightSpec> {
    let per_subject_w = ds
        .subjects()
        .iter()
        .map(|s| {
            let h = basis.design_matrix(&s.times)?;
            let c = psd_part(&(&h * theta * h.transpose()));
            blend_weights(&covariance_of_products_matrix(&c, sigma2), beta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightSpec { beta, per_subject_w })
}

fn psd_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sorted_eigen(m);
    let clipped = vals.map(|v| v.max(0.0));
    let mut out = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    symmetrize(&mut out);
    out
}
