//! Slow, literal reference computations for tests and the acceptance suite.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use twofloat::TwoFloat;

use crate::dataset::{SparseFunctionalDataset, SubjectRecord};
use crate::design::{build_design, pair_index, raw_covariances, Design};
use crate::error::{FaceError, Result};
use crate::gcv;
use crate::linalg::cholesky_with_ridge;
use crate::predict::{predict_subject, Model};
use crate::solver::{cross_products, diagonalize, Block, Weights, EXACT_ICV_LIMIT};
use crate::splines::{make_basis, PenaltyMatrices, SplineBasis};
use crate::weights::{covariance_of_products_matrix, working_weights, DEFAULT_BETA};

/// Fully stacked problem with an explicit `N x N` weight matrix.
#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub c_hat: DVector<f64>,
    pub bounds: Vec<Range<usize>>,
    /// Added to `X^T W X`; set it to the diagonalization's ridge to compare like with like.
    pub ridge: f64,
}

impl DenseProblem {
    pub fn from_blocks(blocks: &[Block], weights: &Weights, q: &DMatrix<f64>) -> Result<Self> {
        let n: usize = blocks.iter().map(|b| b.y.len()).sum();
        if n > EXACT_ICV_LIMIT {
            return Err(FaceError::TooLarge { n, limit: EXACT_ICV_LIMIT });
        }
        let p = q.nrows();
        let mut x = DMatrix::zeros(n, p);
        let mut w = DMatrix::zeros(n, n);
        let mut c_hat = DVector::zeros(n);
        let mut bounds = Vec::with_capacity(blocks.len());
        let mut row = 0;
        for (i, b) in blocks.iter().enumerate() {
            let m = b.y.len();
            x.view_mut((row, 0), (m, p)).copy_from(&b.x);
            w.view_mut((row, row), (m, m)).copy_from(&weights.block(i, m));
            c_hat.rows_mut(row, m).copy_from(&b.y);
            bounds.push(row..row + m);
            row += m;
        }
        Ok(Self { x, w, q: q.clone(), c_hat, bounds, ridge: 0.0 })
    }

    pub fn n(&self) -> usize {
        self.c_hat.len()
    }
}

/// `S = X (X^T W X + ridge I + lambda Q)^{-1} X^T W`, formed and solved in
/// double-double arithmetic so that large `lambda` does not swamp `X^T W X`.
pub fn dense_smoother(prob: &DenseProblem, lambda: f64) -> Result<DMatrix<f64>> {
    if prob.n() > EXACT_ICV_LIMIT {
        return Err(FaceError::TooLarge { n: prob.n(), limit: EXACT_ICV_LIMIT });
    }
    let x = Dd::from_matrix(&prob.x);
    let xtw = x.transpose().mul(&Dd::from_matrix(&prob.w));
    let m = penalized_system(&x, &xtw, &prob.q, prob.ridge, lambda);
    let coef = m.solve(xtw).ok_or_else(|| FaceError::Singular("dense penalized system".into()))?;
    Ok(x.mul(&coef).to_f64())
}

/// `X^T W X + ridge I + lambda Q` in double-double arithmetic.
fn penalized_system(x: &Dd, xtw: &Dd, q: &DMatrix<f64>, ridge: f64, lambda: f64) -> Dd {
    let mut m = xtw.mul(x);
    let lam = TwoFloat::from(lambda);
    let ridge = TwoFloat::from(ridge);
    for i in 0..m.rows {
        for j in 0..m.cols {
            let v = m.get(i, j) + lam * TwoFloat::from(q[(i, j)]);
            m.set(i, j, if i == j { v + ridge } else { v });
        }
    }
    m
}

/// Quotient refined by one correction step; the library quotient alone is
/// only accurate to double precision.
fn dd_div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q = a / b;
    q + (a - q * b) / b
}

/// Row-major dense matrix of double-double numbers.
#[derive(Clone)]
struct Dd {
    rows: usize,
    cols: usize,
    data: Vec<TwoFloat>,
}

impl Dd {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(TwoFloat::from(m[(i, j)]));
            }
        }
        Self { rows, cols, data }
    }

    fn get(&self, i: usize, j: usize) -> TwoFloat {
        self.data[i * self.cols + j]
    }

    fn set(&mut self, i: usize, j: usize, v: TwoFloat) {
        self.data[i * self.cols + j] = v;
    }

    fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    fn mul(&self, other: &Self) -> Self {
        let mut data = vec![TwoFloat::from(0.0); self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Self { rows: self.rows, cols: other.cols, data }
    }

    /// Gaussian elimination with partial pivoting on `self X = rhs`.
    fn solve(mut self, mut rhs: Self) -> Option<Self> {
        let n = self.rows;
        for col in 0..n {
            let pivot = (col..n).max_by(|&a, &b| {
                self.get(a, col).abs().partial_cmp(&self.get(b, col).abs()).unwrap_or(std::cmp::Ordering::Equal)
            })?;
            if self.get(pivot, col) == 0.0 {
                return None;
            }
            if pivot != col {
                for j in 0..n {
                    let t = self.get(col, j);
                    self.set(col, j, self.get(pivot, j));
                    self.set(pivot, j, t);
                }
                for j in 0..rhs.cols {
                    let t = rhs.get(col, j);
                    rhs.set(col, j, rhs.get(pivot, j));
                    rhs.set(pivot, j, t);
                }
            }
            let d = self.get(col, col);
            for r in (col + 1)..n {
                let f = dd_div(self.get(r, col), d);
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    self.set(r, j, self.get(r, j) - f * self.get(col, j));
                }
                for j in 0..rhs.cols {
                    rhs.set(r, j, rhs.get(r, j) - f * rhs.get(col, j));
                }
            }
        }
        for col in (0..n).rev() {
            let d = self.get(col, col);
            for j in 0..rhs.cols {
                let mut v = rhs.get(col, j);
                for k in (col + 1)..n {
                    v -= self.get(col, k) * rhs.get(k, j);
                }
                rhs.set(col, j, dd_div(v, d));
            }
        }
        Some(rhs)
    }

    fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| f64::from(self.get(i, j)))
    }
}

/// Literal generalized criterion
/// `||C - S C||^2 + 2 sum_i (S_i C - C_i)^T S_ii (S_i C - C_i)`.
pub fn dense_igcv(prob: &DenseProblem, lambda: f64) -> Result<f64> {
    let s = dense_smoother(prob, lambda)?;
    let fitted = &s * &prob.c_hat;
    let resid = &fitted - &prob.c_hat;
    let mut total = resid.norm_squared();
    for r in &prob.bounds {
        let m = r.len();
        let s_ii = s.view((r.start, r.start), (m, m));
        let e = resid.rows(r.start, m);
        total += 2.0 * e.dot(&(s_ii * e));
    }
    Ok(total)
}

/// Leave-one-subject-out error by refitting without each subject.
pub fn refit_icv(prob: &DenseProblem, lambda: f64) -> Result<f64> {
    let n = prob.n();
    let mut total = 0.0;
    for r in &prob.bounds {
        let keep: Vec<usize> = (0..n).filter(|k| !r.contains(k)).collect();
        let x = Dd::from_matrix(&prob.x.select_rows(&keep));
        let w = Dd::from_matrix(&prob.w.select_rows(&keep).select_columns(&keep));
        let y = Dd::from_matrix(&DMatrix::from_column_slice(keep.len(), 1, prob.c_hat.select_rows(&keep).as_slice()));
        let xtw = x.transpose().mul(&w);
        let m = penalized_system(&x, &xtw, &prob.q, prob.ridge, lambda);
        let alpha = m
            .solve(xtw.mul(&y))
            .ok_or_else(|| FaceError::Singular("leave-out system".into()))?
            .to_f64();
        let pred = prob.x.rows(r.start, r.len()) * alpha;
        total += (pred.column(0) - prob.c_hat.rows(r.start, r.len())).norm_squared();
    }
    Ok(total)
}

/// Fourth moments of a zero-mean Gaussian vector by summing over all perfect
/// matchings of the index list.
pub fn gaussian_moment(cov: &DMatrix<f64>, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    if idx.len() % 2 == 1 {
        return 0.0;
    }
    let first = idx[0];
    let rest = &idx[1..];
    (0..rest.len())
        .map(|k| {
            let remaining: Vec<usize> = rest.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &v)| v).collect();
            cov[(first, rest[k])] * gaussian_moment(cov, &remaining)
        })
        .sum()
}

/// `Cov(C_hat)` for `r = u + e`, `u ~ N(0, C)`, `e ~ N(0, sigma2 I)`, by
/// expanding each `r_j` into its latent and noise parts and applying the
/// matching sum to the `2m`-dimensional joint vector.
pub fn isserlis_cov(c: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let m = c.nrows();
    let mut joint = DMatrix::zeros(2 * m, 2 * m);
    joint.view_mut((0, 0), (m, m)).copy_from(c);
    for k in 0..m {
        joint[(m + k, m + k)] = sigma2;
    }
    let pairs = pair_index(m);
    let moment = |idx: &[usize]| -> f64 {
        // sum over latent/noise choices for each factor
        let mut total = 0.0;
        for mask in 0..(1usize << idx.len()) {
            let expanded: Vec<usize> = idx
                .iter()
                .enumerate()
                .map(|(b, &j)| if mask >> b & 1 == 1 { m + j } else { j })
                .collect();
            total += gaussian_moment(&joint, &expanded);
        }
        total
    };
    DMatrix::from_fn(pairs.len(), pairs.len(), |a, b| {
        let (j, jp) = pairs[a];
        let (k, kp) = pairs[b];
        moment(&[j, jp, k, kp]) - moment(&[j, jp]) * moment(&[k, kp])
    })
}

/// Monte-Carlo covariance of the products and the standard error of each entry.
pub fn mc_cov_products<R: Rng>(
    c: &DMatrix<f64>,
    sigma2: f64,
    draws: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = c.nrows();
    let (chol, _) = cholesky_with_ridge(c, 0.0, 1e-6)?;
    let l = chol.l();
    let pairs = pair_index(m);
    let k = pairs.len();
    let sd = sigma2.sqrt();
    let mut samples = DMatrix::zeros(draws, k);
    for d in 0..draws {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &l * z;
        let r: Vec<f64> = (0..m).map(|j| u[j] + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        for (a, &(j, jp)) in pairs.iter().enumerate() {
            samples[(d, a)] = r[j] * r[jp];
        }
    }
    let means: Vec<f64> = (0..k).map(|a| samples.column(a).mean()).collect();
    for a in 0..k {
        samples.column_mut(a).add_scalar_mut(-means[a]);
    }
    let nf = draws as f64;
    let mut cov = DMatrix::zeros(k, k);
    let mut se = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let prod = samples.column(a).component_mul(&samples.column(b));
            let mean = prod.sum() / nf;
            let var = prod.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            cov[(a, b)] = mean;
            cov[(b, a)] = mean;
            se[(a, b)] = (var / nf).sqrt();
            se[(b, a)] = se[(a, b)];
        }
    }
    Ok((cov, se))
}

/// Conditional mean and covariance of the trailing block given the leading
/// `n_obs` coordinates equal `y_obs`.
pub fn mvn_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n_obs: usize,
    y_obs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    let k = n - n_obs;
    let s_oo = cov.view((0, 0), (n_obs, n_obs)).into_owned();
    let s_no = cov.view((n_obs, 0), (k, n_obs)).into_owned();
    let s_nn = cov.view((n_obs, n_obs), (k, k)).into_owned();
    let inv = s_oo
        .try_inverse()
        .ok_or_else(|| FaceError::Singular("observed block".into()))?;
    let gain = &s_no * inv;
    let cond_mean = mean.rows(n_obs, k) + &gain * (y_obs - mean.rows(0, n_obs));
    let cond_cov = s_nn - &gain * s_no.transpose();
    Ok((cond_mean, cond_cov))
}

/// Small random estimation problem with realistic design and GLS weights.
pub struct RandomInstance {
    pub dataset: SparseFunctionalDataset,
    pub basis: SplineBasis,
    pub design: Design,
    pub weights: Weights,
    pub q: DMatrix<f64>,
}

/// Draws up to `max_n` subjects with up to `max_m` observations and a basis
/// of dimension between 3 and `max_c`. Draws with no more raw products than
/// parameters are rejected, since the fit then interpolates and both
/// criteria vanish.
pub fn random_instance<R: Rng>(rng: &mut R, max_n: usize, max_m: usize, max_c: usize) -> Result<RandomInstance> {
    let n = rng.random_range(2..=max_n);
    let subjects: Vec<SubjectRecord> = (0..n)
        .map(|i| {
            let m = rng.random_range(1..=max_m);
            let t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            SubjectRecord::new(format!("{i}"), t, y)
        })
        .collect::<Result<_>>()?;
    let dataset = SparseFunctionalDataset::with_domain(subjects, (0.0, 1.0))?;
    let c = rng.random_range(3..=max_c.max(3));
    let order = rng.random_range(2..=(c - 1).min(4));
    let basis = make_basis(&dataset.all_times(), c - order, order)?;
    let design = build_design(&dataset, &basis, raw_covariances(&dataset, |_| 0.0))?;
    let a = DMatrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0));
    let theta = &a * a.transpose();
    let spec = working_weights(&dataset, &basis, &theta, rng.random_range(0.1..1.0), DEFAULT_BETA)?;
    let q = PenaltyMatrices::new(c)?.q;
    let rows: usize = design.blocks.iter().map(|b| b.y.len()).sum();
    if rows <= q.nrows() {
        return Err(FaceError::InvalidInput(format!("{rows} products for {} parameters", q.nrows())));
    }
    Ok(RandomInstance { dataset, basis, design, weights: Weights::PerBlock(spec.per_subject_w), q })
}

/// Largest relative gap between the closed-form generalized criterion and
/// its literal dense evaluation over `instances` random problems.
pub fn igcv_agreement<R: Rng>(rng: &mut R, instances: usize, lambdas: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let Ok(inst) = random_instance(rng, 8, 4, 5) else { continue };
        let blocks = &inst.design.blocks;
        let cp = cross_products(blocks, &inst.weights);
        let dg = diagonalize(&cp.xtwx, &inst.q)?;
        let pre = gcv::precompute(blocks, &inst.weights, &dg);
        let mut prob = DenseProblem::from_blocks(blocks, &inst.weights, &inst.q)?;
        prob.ridge = dg.ridge;
        for &lambda in lambdas {
            let fast = gcv::igcv_value(&pre, &dg.s, lambda);
            let dense = dense_igcv(&prob, lambda)?;
            worst = worst.max((fast - dense).abs() / dense.abs().max(f64::MIN_POSITIVE));
        }
        done += 1;
    }
    Ok(worst)
}

/// Largest relative gap between the exact leave-one-subject-out formula and
/// brute-force refits.
pub fn icv_agreement<R: Rng>(rng: &mut R, instances: usize, lambdas: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let Ok(inst) = random_instance(rng, 6, 4, 5) else { continue };
        let blocks = &inst.design.blocks;
        let mut prob = DenseProblem::from_blocks(blocks, &inst.weights, &inst.q)?;
        let p = inst.q.nrows();
        prob.ridge = 1e-6 * (prob.x.transpose() * &prob.w * &prob.x).trace() / p as f64;
        let mut vals = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            match gcv::exact_icv(blocks, &inst.weights, &inst.q, lambda, prob.ridge) {
                Ok(fast) => vals.push((fast, refit_icv(&prob, lambda)?)),
                Err(FaceError::Singular(_)) => break,
                Err(e) => return Err(e),
            }
        }
        if vals.len() < lambdas.len() {
            continue;
        }
        for (fast, slow) in vals {
            worst = worst.max((fast - slow).abs() / slow.abs().max(f64::MIN_POSITIVE));
        }
        done += 1;
    }
    Ok(worst)
}

/// Largest absolute gap between `Cov(C_hat)` from the closed form and from
/// Gaussian moment enumeration, over random covariances with up to `max_m`
/// observations.
pub fn isserlis_agreement<R: Rng>(rng: &mut R, instances: usize, max_m: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let m = rng.random_range(1..=max_m);
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let c = &a * a.transpose();
        let s2 = rng.random_range(0.05..1.0);
        let gap = (isserlis_cov(&c, s2) - covariance_of_products_matrix(&c, s2)).amax();
        worst = worst.max(gap);
    }
    worst
}

/// Largest absolute gap between `predict_subject` and partitioned-Gaussian
/// conditioning on the stacked joint covariance.
pub fn prediction_agreement<R: Rng>(rng: &mut R, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n_int = rng.random_range(1..=6);
        let basis = SplineBasis::from_interior_knots(
            (1..=n_int).map(|k| k as f64 / (n_int + 1) as f64).collect(),
            4,
        )?;
        let c = basis.dim();
        let a = DMatrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0));
        let theta = &a * a.transpose() / c as f64;
        let sigma2 = rng.random_range(0.05..1.0);
        let shift = rng.random_range(-1.0..1.0);
        let mean = move |t: f64| shift + (3.0 * t).sin();
        let m = rng.random_range(1..=6);
        let times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let values: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let rec = SubjectRecord::new("s", times, values)?;
        let new: Vec<f64> = (0..rng.random_range(1..=5)).map(|_| rng.random::<f64>()).collect();

        let model = Model { basis: &basis, theta: &theta, sigma2, mean: &mean };
        let pred = predict_subject(model, &rec, &new, false)?;

        let all: Vec<f64> = rec.times.iter().chain(&new).copied().collect();
        let h = basis.design_matrix(&all)?;
        let joint = &h * &theta * h.transpose() + DMatrix::identity(all.len(), all.len()) * sigma2;
        let joint_mean = DVector::from_iterator(all.len(), all.iter().map(|&t| mean(t)));
        let y = DVector::from_column_slice(&rec.values);
        let (cm, cc) = mvn_condition(&joint_mean, &joint, m, &y)?;
        worst = worst.max((pred.x_hat - cm).amax()).max((pred.cov - cc).amax());
    }
    Ok(worst)
}
