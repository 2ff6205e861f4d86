//! JSON fit artifact shared by the `fit`, `eigen` and `predict` commands.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};
use crate::linalg::unit_grid;
use crate::solver::{FitDiagnostics, FitResult, MeanFit};
use crate::spectral::eval_cov_grid;
use crate::splines::{unvech, vech, vech_len, SplineBasis};

pub const FORMAT: &str = "face-fit/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub format: String,
    /// Original time range mapped onto `[0, 1]`.
    pub time_domain: [f64; 2],
    pub basis: SplineBasis,
    pub theta_vech: Vec<f64>,
    pub sigma2: f64,
    pub lambda: [f64; 2],
    pub mean: MeanFit,
    /// Grid in original time units.
    pub grid: Vec<f64>,
    /// Fitted covariance on `grid x grid`, row by row.
    pub covariance: Vec<Vec<f64>>,
    #[serde(default, skip_deserializing)]
    pub diagnostics: Option<FitDiagnostics>,
}

impl FitArtifact {
    pub fn from_fit(fit: &FitResult, g: usize) -> Result<Self> {
        let unit = unit_grid(g);
        let cov = eval_cov_grid(&fit.basis, &fit.theta, &unit)?;
        let (lo, hi) = fit.time_domain;
        Ok(Self {
            format: FORMAT.into(),
            time_domain: [lo, hi],
            basis: fit.basis.clone(),
            theta_vech: vech(&fit.theta).as_slice().to_vec(),
            sigma2: fit.sigma2,
            lambda: fit.lambda,
            mean: fit.mean_fit.clone(),
            grid: unit.iter().map(|t| lo + t * (hi - lo)).collect(),
            covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            diagnostics: Some(fit.diagnostics.clone()),
        })
    }

    /// Artifact for a known surface on `basis` (used to inspect a truth).
    pub fn from_parts(basis: SplineBasis, theta: &DMatrix<f64>, sigma2: f64, mean: MeanFit, g: usize) -> Result<Self> {
        let unit = unit_grid(g);
        let cov = eval_cov_grid(&basis, theta, &unit)?;
        Ok(Self {
            format: FORMAT.into(),
            time_domain: [0.0, 1.0],
            basis,
            theta_vech: vech(theta).as_slice().to_vec(),
            sigma2,
            lambda: [0.0; 2],
            mean,
            grid: unit,
            covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            diagnostics: None,
        })
    }

    pub fn theta(&self) -> DMatrix<f64> {
        unvech(&DVector::from_column_slice(&self.theta_vech), self.basis.dim())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| FaceError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| FaceError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut art: Self = serde_json::from_str(text)?;
        if art.format != FORMAT {
            return Err(FaceError::InvalidInput(format!(
                "unsupported artifact format {:?}, expected {FORMAT:?}",
                art.format
            )));
        }
        art.basis = art.basis.rebuilt()?;
        art.mean.basis = art.mean.basis.rebuilt()?;
        if art.theta_vech.len() != vech_len(art.basis.dim()) {
            return Err(FaceError::Dimension(format!(
                "theta has {} entries, basis needs {}",
                art.theta_vech.len(),
                vech_len(art.basis.dim())
            )));
        }
        if art.mean.coefficients.len() != art.mean.basis.dim() {
            return Err(FaceError::Dimension("mean coefficients do not match the mean basis".into()));
        }
        let [lo, hi] = art.time_domain;
        if !(hi > lo) {
            return Err(FaceError::DegenerateDomain(lo));
        }
        Ok(art)
    }

    pub fn span(&self) -> f64 {
        self.time_domain[1] - self.time_domain[0]
    }

    /// Original time to `[0, 1]`; values a rounding error outside are clamped.
    pub fn to_unit(&self, t: f64) -> Result<f64> {
        let u = (t - self.time_domain[0]) / self.span();
        if !(-1e-12..=1.0 + 1e-12).contains(&u) {
            return Err(FaceError::OutOfDomain { value: t });
        }
        Ok(u.clamp(0.0, 1.0))
    }

    pub fn to_original(&self, u: f64) -> f64 {
        self.time_domain[0] + u * self.span()
    }
}
