//! Penalized weighted least squares, its simultaneous diagonalization, the
//! two-step OLS -> GLS covariance fit and the univariate P-spline mean.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SparseFunctionalDataset;
use crate::design::{build_design, raw_covariances, Design};
use crate::error::{FaceError, Result};
use crate::gcv::{self, IcvCache};
use crate::linalg::{cholesky_with_ridge, logspace, sorted_eigen, symmetrize};
use crate::splines::{self, make_basis, unvech, PenaltyMatrices, SplineBasis};
use crate::weights::{working_weights, DEFAULT_BETA};

/// Relative ridge added to `X^T W X` before diagonalization.
pub const DIAG_RIDGE: f64 = 1e-8;
/// Largest relative ridge tried before giving up.
pub const DIAG_RIDGE_LIMIT: f64 = 1e-4;

/// Rows of one subject: design `x` and response `y`.
#[derive(Debug, Clone)]
pub struct Block {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Block-diagonal weight matrix `W = blockdiag(W_1, ..., W_n)`.
#[derive(Debug, Clone)]
pub enum Weights {
    Identity,
    PerBlock(Vec<DMatrix<f64>>),
}

impl Weights {
    /// `W_i m`.
    pub fn weigh(&self, i: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Weights::Identity => m.clone(),
            Weights::PerBlock(w) => &w[i] * m,
        }
    }

    /// `W_i v`.
    pub fn weigh_vec(&self, i: usize, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Weights::Identity => v.clone(),
            Weights::PerBlock(w) => &w[i] * v,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Weights::Identity)
    }

    /// Dense `W_i` for a block with `n` rows.
    pub fn block(&self, i: usize, n: usize) -> DMatrix<f64> {
        match self {
            Weights::Identity => DMatrix::identity(n, n),
            Weights::PerBlock(w) => w[i].clone(),
        }
    }
}

/// `X^T W X` and `X^T W y`, accumulated block by block in block order.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    pub xtwx: DMatrix<f64>,
    pub xtwy: DVector<f64>,
}

pub fn cross_products(blocks: &[Block], weights: &Weights) -> CrossProducts {
    let p = blocks.first().map_or(0, |b| b.x.ncols());
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let wx = weights.weigh(i, &b.x);
            (b.x.transpose() * &wx, wx.transpose() * &b.y)
        })
        .collect();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for (a, v) in parts {
        xtwx += a;
        xtwy += v;
    }
    symmetrize(&mut xtwx);
    CrossProducts { xtwx, xtwy }
}

/// Solves `(X^T W X + lambda Q) alpha = X^T W y`. A ridge is added only if
/// the plain system is not positive definite.
pub fn solve_penalized(cp: &CrossProducts, q: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    let m = &cp.xtwx + q * lambda;
    let (chol, ridge) = cholesky_with_ridge(&m, 0.0, DIAG_RIDGE_LIMIT)?;
    if ridge > 0.0 {
        warn!("penalized system needed a ridge of {ridge:e}; consider fewer knots");
    }
    Ok(chol.solve(&cp.xtwy))
}

/// Closed-form penalized weighted least squares estimate.
pub fn fit_pwls(
    blocks: &[Block],
    weights: &Weights,
    q: &DMatrix<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    solve_penalized(&cross_products(blocks, weights), q, lambda)
}

/// Simultaneous diagonalization: `A^T (X^T W X + ridge I) A = I` and
/// `A^T Q A = diag(s)`, with `s` descending. Neither depends on lambda, and
/// `(X^T W X + ridge I + lambda Q)^{-1} = A (I + lambda diag(s))^{-1} A^T`.
#[derive(Debug, Clone)]
pub struct Diagonalization {
    pub a: DMatrix<f64>,
    pub s: DVector<f64>,
    pub ridge: f64,
}

pub fn diagonalize(xtwx: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Diagonalization> {
    let (chol, ridge) = cholesky_with_ridge(xtwx, DIAG_RIDGE, DIAG_RIDGE_LIMIT)?;
    from_factor(chol.l(), q, ridge)
}

/// Same as [`diagonalize`] with a caller-chosen absolute ridge.
pub fn diagonalize_with_ridge(xtwx: &DMatrix<f64>, q: &DMatrix<f64>, ridge: f64) -> Result<Diagonalization> {
    let mut m = xtwx.clone();
    for k in 0..m.nrows() {
        m[(k, k)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(m)
        .ok_or_else(|| FaceError::Singular("X^T W X + ridge I is not positive definite".into()))?;
    from_factor(chol.l(), q, ridge)
}

fn from_factor(l: DMatrix<f64>, q: &DMatrix<f64>, ridge: f64) -> Result<Diagonalization> {
    let p = l.nrows();

    // Q = R R^T with R of full column rank, so L^{-1} Q L^{-T} = K K^T has an
    // exact null space and its small eigenvalues keep relative accuracy.
    let (mu, v) = sorted_eigen(q);
    let mu_max = mu.max().max(0.0);
    let rank = mu.iter().filter(|&&m| m > 1e-10 * mu_max).count();
    let mut r = v.columns(0, rank).into_owned();
    for (k, mut col) in r.column_iter_mut().enumerate() {
        col.scale_mut(mu[k].sqrt());
    }
    let k = l
        .solve_lower_triangular(&r)
        .ok_or_else(|| FaceError::Singular("triangular solve failed".into()))?;
    let svd = k.svd(true, false);
    let u_range = svd.u.ok_or_else(|| FaceError::Singular("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut u = DMatrix::zeros(p, p);
    let mut s = DVector::zeros(p);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_range.column(src));
        s[dst] = svd.singular_values[src].powi(2);
    }
    if rank < p {
        let range = u.columns(0, rank).into_owned();
        let mut proj = DMatrix::identity(p, p) - &range * range.transpose();
        symmetrize(&mut proj);
        let (_, vecs) = sorted_eigen(&proj);
        u.columns_mut(rank, p - rank).copy_from(&vecs.columns(0, p - rank));
    }
    let a = l
        .transpose()
        .solve_upper_triangular(&u)
        .ok_or_else(|| FaceError::Singular("triangular solve failed".into()))?;
    Ok(Diagonalization { a, s, ridge })
}

impl Diagonalization {
    /// `1 / (1 + lambda s)` elementwise.
    pub fn shrinkage(&self, lambda: f64) -> DVector<f64> {
        self.s.map(|s| 1.0 / (1.0 + lambda * s))
    }

    /// `F_i = X_i A` for every block.
    pub fn f_blocks(&self, blocks: &[Block]) -> Vec<DMatrix<f64>> {
        blocks.par_iter().map(|b| &b.x * &self.a).collect()
    }

    /// Penalized estimate through the diagonal form.
    pub fn solve(&self, xtwy: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let f_tilde = self.a.transpose() * xtwy;
        &self.a * f_tilde.component_mul(&self.shrinkage(lambda))
    }
}

/// Smoothing-parameter search grid, logarithmically spaced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self { min: 1e-6, max: 1e6, count: 100 }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        logspace(self.min, self.max, self.count)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max >= self.min && self.count >= 1 && self.max.is_finite()) {
            return Err(FaceError::InvalidInput(format!(
                "invalid lambda grid [{}, {}] x {}",
                self.min, self.max, self.count
            )));
        }
        Ok(())
    }
}

/// Criterion minimized over the lambda grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Criterion {
    /// Closed-form generalized leave-one-subject-out criterion.
    #[default]
    Igcv,
    /// Exact leave-one-subject-out error; limited to `N <= 5000`.
    ExactIcv,
}

pub const EXACT_ICV_LIMIT: usize = 5000;

/// Outcome of a grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub index: usize,
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub on_boundary: bool,
}

/// Picks the grid minimizer; ties go to the smallest lambda.
pub fn select_from_scores(grid: Vec<f64>, scores: Vec<f64>) -> Result<LambdaSelection> {
    let mut best: Option<usize> = None;
    for (k, &v) in scores.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < scores[b]) {
            best = Some(k);
        }
    }
    let index = best.ok_or_else(|| FaceError::Singular("no finite criterion value on the grid".into()))?;
    let on_boundary = grid.len() > 1 && (index == 0 || index == grid.len() - 1);
    Ok(LambdaSelection { lambda: grid[index], index, grid, scores, on_boundary })
}

/// One penalized fit with lambda chosen on the grid.
#[derive(Debug, Clone)]
pub struct StepFit {
    pub alpha: DVector<f64>,
    pub selection: LambdaSelection,
    pub diagonalization: Diagonalization,
}

pub fn fit_step(
    blocks: &[Block],
    weights: &Weights,
    q: &DMatrix<f64>,
    grid: &LambdaGrid,
    criterion: Criterion,
) -> Result<StepFit> {
    grid.validate()?;
    let cp = cross_products(blocks, weights);
    let diagonalization = diagonalize(&cp.xtwx, q)?;
    let lambdas = grid.values();
    let scores: Vec<f64> = match criterion {
        Criterion::Igcv => {
            let pre = gcv::precompute(blocks, weights, &diagonalization);
            lambdas
                .par_iter()
                .map(|&l| gcv::igcv_value(&pre, &diagonalization.s, l))
                .collect()
        }
        Criterion::ExactIcv => {
            let n: usize = blocks.iter().map(|b| b.y.len()).sum();
            if n > EXACT_ICV_LIMIT {
                return Err(FaceError::TooLarge { n, limit: EXACT_ICV_LIMIT });
            }
            let cache = IcvCache::new(blocks, weights, &diagonalization);
            lambdas
                .par_iter()
                .map(|&l| cache.value(l).unwrap_or(f64::INFINITY))
                .collect()
        }
    };
    let selection = select_from_scores(lambdas, scores)?;
    let alpha = solve_penalized(&cp, q, selection.lambda)?;
    Ok(StepFit { alpha, selection, diagonalization })
}

/// Univariate P-spline estimate of the mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFit {
    pub basis: SplineBasis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
}

impl MeanFit {
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let (start, vals) = self
            .basis
            .eval_nonzero(t)
            .expect("clamped time lies in the basis domain");
        vals.iter().enumerate().map(|(k, v)| v * self.coefficients[start + k]).sum()
    }
}

/// Options for the mean and covariance fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_interior: usize,
    pub order: usize,
    pub mean_n_interior: usize,
    pub beta: f64,
    pub grid: LambdaGrid,
    pub criterion: Criterion,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_interior: splines::DEFAULT_INTERIOR_KNOTS,
            order: splines::DEFAULT_ORDER,
            mean_n_interior: splines::DEFAULT_INTERIOR_KNOTS,
            beta: DEFAULT_BETA,
            grid: LambdaGrid::default(),
            criterion: Criterion::Igcv,
        }
    }
}

/// Fits the mean by a P-spline whose lambda minimizes the subject-grouped iGCV.
pub fn fit_mean_pspline(ds: &SparseFunctionalDataset, opts: &FitOptions) -> Result<MeanFit> {
    let ds = ds.rescale_time()?;
    let basis = make_basis(&ds.all_times(), opts.mean_n_interior, opts.order)?;
    let blocks = ds
        .subjects()
        .iter()
        .map(|s| {
            Ok(Block {
                x: basis.design_matrix(&s.times)?,
                y: DVector::from_column_slice(&s.values),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = splines::difference_matrix(basis.dim())?;
    let q = &d * d.transpose();
    let step = fit_step(&blocks, &Weights::Identity, &q, &opts.grid, Criterion::Igcv)?;
    Ok(MeanFit {
        basis,
        coefficients: step.alpha.as_slice().to_vec(),
        lambda: step.selection.lambda,
    })
}

/// Diagnostics recorded by [`fit_two_step`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub step1: LambdaSelection,
    pub step2: LambdaSelection,
    /// Noise variance used to build the step-2 weights.
    pub working_sigma2: f64,
    /// Unclamped final noise-variance estimate.
    pub sigma2_raw: f64,
    pub steps: usize,
}

/// Fitted covariance surface and noise variance.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: DMatrix<f64>,
    pub sigma2: f64,
    /// Selected lambda for the OLS and GLS steps.
    pub lambda: [f64; 2],
    pub basis: SplineBasis,
    pub mean_fit: MeanFit,
    pub time_domain: (f64, f64),
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// `C(s, t) = b(s)^T Theta b(t)`.
    pub fn covariance(&self, s: f64, t: f64) -> Result<f64> {
        let bs = self.basis.eval(s)?;
        let bt = self.basis.eval(t)?;
        Ok((bs.transpose() * &self.theta * bt)[0])
    }
}

/// Two-step estimate: OLS fit, plug-in weights, GLS refit; lambda is chosen
/// afresh in each step.
pub fn fit_two_step(ds: &SparseFunctionalDataset, opts: &FitOptions) -> Result<FitResult> {
    let ds = ds.rescale_time()?;
    if ds.subjects().iter().all(|s| s.len() < 2) {
        return Err(FaceError::NotIdentifiable);
    }
    let mean_fit = fit_mean_pspline(&ds, opts)?;
    let basis = make_basis(&ds.all_times(), opts.n_interior, opts.order)?;
    let design = build_design(&ds, &basis, raw_covariances(&ds, |t| mean_fit.eval(t)))?;
    let pm = PenaltyMatrices::new(basis.dim())?;
    fit_from_design(&ds, &design, &basis, &pm.q, mean_fit, opts)
}

fn fit_from_design(
    ds: &SparseFunctionalDataset,
    design: &Design,
    basis: &SplineBasis,
    q: &DMatrix<f64>,
    mean_fit: MeanFit,
    opts: &FitOptions,
) -> Result<FitResult> {
    let c = basis.dim();
    let nq = splines::vech_len(c);

    let step1 = fit_step(&design.blocks, &Weights::Identity, q, &opts.grid, opts.criterion)?;
    if step1.selection.on_boundary {
        warn!("step-1 lambda {:e} is on the grid boundary", step1.selection.lambda);
    }
    let residual_var = residual_variance(ds, &mean_fit);
    let working_sigma2 = step1.alpha[nq].max(1e-6 * residual_var);
    let theta0 = unvech(&step1.alpha.rows(0, nq).into_owned(), c);
    let spec = working_weights(ds, basis, &theta0, working_sigma2, opts.beta)?;

    let step2 = fit_step(
        &design.blocks,
        &Weights::PerBlock(spec.per_subject_w),
        q,
        &opts.grid,
        opts.criterion,
    )?;
    if step2.selection.on_boundary {
        warn!("step-2 lambda {:e} is on the grid boundary", step2.selection.lambda);
    }
    let sigma2_raw = step2.alpha[nq];
    if sigma2_raw < 0.0 {
        warn!("negative noise variance estimate {sigma2_raw:e} clamped to zero");
    }
    Ok(FitResult {
        theta: unvech(&step2.alpha.rows(0, nq).into_owned(), c),
        sigma2: sigma2_raw.max(0.0),
        lambda: [step1.selection.lambda, step2.selection.lambda],
        basis: basis.clone(),
        mean_fit,
        time_domain: ds.time_domain(),
        diagnostics: FitDiagnostics {
            step1: step1.selection,
            step2: step2.selection,
            working_sigma2,
            sigma2_raw,
            steps: 2,
        },
    })
}

fn residual_variance(ds: &SparseFunctionalDataset, mean: &MeanFit) -> f64 {
    let r: Vec<f64> = ds
        .subjects()
        .iter()
        .flat_map(|s| s.times.iter().zip(&s.values).map(|(&t, &y)| y - mean.eval(t)))
        .collect();
    if r.len() < 2 {
        return r.first().map_or(1.0, |v| v * v).max(f64::MIN_POSITIVE);
    }
    let m = r.iter().sum::<f64>() / r.len() as f64;
    let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
    v.max(f64::MIN_POSITIVE)
}

/// `C(s, t)` for a symmetric coefficient matrix on `basis`; exact symmetry in
/// `(s, t)` follows from evaluating `b(s)^T Theta b(t)` on a symmetric `Theta`.
pub fn surface(basis: &SplineBasis, theta: &DMatrix<f64>, s: f64, t: f64) -> Result<f64> {
    let bs = basis.eval(s)?;
    let bt = basis.eval(t)?;
    Ok((bs.transpose() * theta * bt)[0])
}

/// Penalized objective pieces at `alpha`: weighted residual sum of squares
/// and the penalty `alpha^T Q alpha`.
pub fn objective_terms(
    blocks: &[Block],
    weights: &Weights,
    q: &DMatrix<f64>,
    alpha: &DVector<f64>,
) -> (f64, f64) {
    let fit: f64 = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let r = &b.y - &b.x * alpha;
            r.dot(&weights.weigh_vec(i, &r))
        })
        .sum();
    (fit, (alpha.transpose() * q * alpha)[0])
}
