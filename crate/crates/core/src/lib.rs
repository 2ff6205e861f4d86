//! Fast covariance estimation for sparse functional data.
//!
//! Raw covariance products of mean-centred observations are smoothed with a
//! symmetric tensor-product P-spline while the measurement-error variance is
//! estimated jointly. The smoothing parameter is chosen by a closed-form
//! approximation to leave-one-subject-out cross-validation whose per-lambda
//! cost does not depend on the number of observations. Fitted covariances feed
//! an eigen-analysis and conditional-Gaussian curve prediction.
//!
//! The pipeline, bottom up:
//!
//! * [`dataset`]: sparse longitudinal observations grouped by subject.
//! * [`splines`]: B-spline bases, difference and duplication matrices, penalties.
//! * [`design`]: raw covariance products and their linear design.
//! * [`weights`]: fourth-moment covariance of the raw products and GLS weights.
//! * [`solver`]: penalized weighted least squares and the two-step fit.
//! * [`gcv`]: leave-one-subject-out criteria.
//! * [`spectral`], [`predict`]: downstream analysis of a fit.
//! * [`sim`]: simulation designs, error criteria and replication studies.

pub mod artifact;
pub mod cli;
pub mod dataset;
pub mod design;
pub mod error;
pub mod gcv;
pub mod linalg;
#[cfg(any(test, feature = "testing"))]
pub mod oracle;
pub mod predict;
pub mod sim;
pub mod solver;
pub mod spectral;
pub mod splines;
pub mod weights;

pub use dataset::{SparseFunctionalDataset, SubjectRecord};
pub use error::{FaceError, Result};
pub use solver::{FitOptions, FitResult};
pub use splines::SplineBasis;
