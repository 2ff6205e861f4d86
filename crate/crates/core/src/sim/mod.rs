//! Simulation designs, evaluation metrics and replication studies.

pub mod matern;
pub mod metrics;

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SparseFunctionalDataset, SubjectRecord};
use crate::error::{FaceError, Result};
use crate::linalg::{cholesky_with_ridge, quantile_sorted};
use crate::solver::{fit_two_step, FitOptions};
use crate::spectral::{eigendecompose, eval_cov_grid, quadrature_grid, tabulate, EigenResult, DEFAULT_GRID};

pub use matern::{bessel_k1, matern_cov};
pub use metrics::{ise_covariance, ise_eigenfunction, se_eigenvalue};

pub const CASE1_EIGENVALUES: [f64; 3] = [1.0, 0.5, 0.25];
/// Nominal Case 2 range and order.
pub const MATERN_PHI: f64 = 0.07;
pub const MATERN_NU: f64 = 1.0;
/// Case 2 covariance is `x K1(x)` with `x = d / MATERN_PHI`; in the
/// `sqrt(2 nu) d / phi` parameterization of [`matern_cov`] that is this range.
pub const MATERN_RANGE: f64 = MATERN_PHI * std::f64::consts::SQRT_2;
/// Points per axis of the product rule used for `∫∫ C`.
pub const SNR_QUADRATURE: usize = 1001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimCase {
    /// Three-term expansion with Fourier eigenfunctions.
    Case1,
    /// Stationary Matérn covariance.
    Case2,
}

/// Sets from which the number of observations per subject is drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MSet {
    /// `{3, ..., 7}`
    I1,
    /// `{5, ..., 15}`
    I2,
}

impl MSet {
    pub fn range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            MSet::I1 => 3..=7,
            MSet::I2 => 5..=15,
        }
    }
}

/// How the noise variance is tied to the signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnrConvention {
    /// `sigma^2 = ∫ C(t, t) dt / snr`
    Trace,
    /// `sigma^2 = ∫∫ C(s, t) ds dt / snr`
    Double,
}

impl SimCase {
    pub fn default_convention(self) -> SnrConvention {
        match self {
            SimCase::Case1 => SnrConvention::Trace,
            SimCase::Case2 => SnrConvention::Double,
        }
    }
}

/// `(sqrt(2) sin 2πt, sqrt(2) cos 4πt, sqrt(2) sin 4πt)`.
pub fn case1_eigenfunctions(t: f64) -> [f64; 3] {
    [
        SQRT_2 * (2.0 * PI * t).sin(),
        SQRT_2 * (4.0 * PI * t).cos(),
        SQRT_2 * (4.0 * PI * t).sin(),
    ]
}

/// True covariance and noise level of a simulation design.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Truth {
    pub case: SimCase,
    pub sigma2: f64,
}

impl Truth {
    pub fn new(case: SimCase, snr: f64, convention: SnrConvention) -> Result<Self> {
        if !(snr > 0.0 && snr.is_finite()) {
            return Err(FaceError::InvalidInput(format!("snr must be positive, got {snr}")));
        }
        let signal = match convention {
            SnrConvention::Trace => trace_integral(case),
            SnrConvention::Double => double_integral(case, SNR_QUADRATURE),
        };
        if signal <= 1e-8 {
            warn!("signal integral {signal:e} is degenerate under this SNR convention");
        }
        Ok(Self { case, sigma2: signal.max(0.0) / snr })
    }

    pub fn cov(&self, s: f64, t: f64) -> f64 {
        match self.case {
            SimCase::Case1 => {
                let (a, b) = (case1_eigenfunctions(s), case1_eigenfunctions(t));
                (0..3).map(|k| CASE1_EIGENVALUES[k] * a[k] * b[k]).sum()
            }
            SimCase::Case2 => matern_cov((s - t).abs(), MATERN_RANGE, MATERN_NU).expect("valid Matérn parameters"),
        }
    }

    pub fn grid(&self, grid: &[f64]) -> DMatrix<f64> {
        tabulate(|s, t| self.cov(s, t), grid)
    }
}

fn trace_integral(case: SimCase) -> f64 {
    match case {
        SimCase::Case1 => CASE1_EIGENVALUES.iter().sum(),
        SimCase::Case2 => 1.0,
    }
}

/// Product midpoint rule for `∫∫ C` with `g` cells per axis.
pub fn double_integral(case: SimCase, g: usize) -> f64 {
    let grid = quadrature_grid(g);
    let gf = g as f64;
    match case {
        SimCase::Case1 => (0..3)
            .map(|k| {
                let m: f64 = grid.iter().map(|&t| case1_eigenfunctions(t)[k]).sum::<f64>() / gf;
                CASE1_EIGENVALUES[k] * m * m
            })
            .sum(),
        SimCase::Case2 => {
            // stationary: weight each lag by the number of grid pairs at that lag
            let step = 1.0 / (g - 1) as f64;
            let mut total = gf;
            for lag in 1..g {
                let c = matern_cov(lag as f64 * step, MATERN_RANGE, MATERN_NU).expect("valid Matérn parameters");
                total += 2.0 * (g - lag) as f64 * c;
            }
            total / (gf * gf)
        }
    }
}

/// Draws `n` subjects from the design described by `truth`.
pub fn generate<R: Rng>(truth: &Truth, n: usize, m_set: MSet, rng: &mut R) -> Result<SparseFunctionalDataset> {
    let noise_sd = truth.sigma2.sqrt();
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let m = rng.random_range(m_set.range());
        let times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let latent = match truth.case {
            SimCase::Case1 => {
                let xi: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
                times
                    .iter()
                    .map(|&t| {
                        let psi = case1_eigenfunctions(t);
                        (0..3).map(|k| CASE1_EIGENVALUES[k].sqrt() * xi[k] * psi[k]).sum()
                    })
                    .collect::<Vec<f64>>()
            }
            SimCase::Case2 => {
                let c = DMatrix::from_fn(m, m, |a, b| truth.cov(times[a], times[b]));
                let (chol, _) = cholesky_with_ridge(&c, 1e-10, 1e-6)?;
                let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                (chol.l() * z).as_slice().to_vec()
            }
        };
        let values = latent
            .iter()
            .map(|&u| u + noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        subjects.push(SubjectRecord::new(format!("{}", i + 1), times, values)?);
    }
    SparseFunctionalDataset::with_domain(subjects, (0.0, 1.0))
}

pub fn gen_case1<R: Rng>(n: usize, m_set: MSet, snr: f64, rng: &mut R) -> Result<(SparseFunctionalDataset, Truth)> {
    let truth = Truth::new(SimCase::Case1, snr, SimCase::Case1.default_convention())?;
    Ok((generate(&truth, n, m_set, rng)?, truth))
}

pub fn gen_case2<R: Rng>(n: usize, m_set: MSet, snr: f64, rng: &mut R) -> Result<(SparseFunctionalDataset, Truth)> {
    let truth = Truth::new(SimCase::Case2, snr, SimCase::Case2.default_convention())?;
    Ok((generate(&truth, n, m_set, rng)?, truth))
}

/// Generator for replication `rep` of a study seeded with `seed`.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub case: SimCase,
    pub n: usize,
    pub m_set: MSet,
    pub snr: f64,
    pub replications: usize,
    pub seed: u64,
    pub grid: usize,
    pub convention: SnrConvention,
    pub fit: FitOptions,
}

impl SimConfig {
    pub fn new(case: SimCase, n: usize, m_set: MSet, snr: f64, replications: usize, seed: u64) -> Self {
        Self {
            case,
            n,
            m_set,
            snr,
            replications,
            seed,
            grid: DEFAULT_GRID,
            convention: case.default_convention(),
            fit: FitOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.replications == 0 || self.grid < 2 {
            return Err(FaceError::InvalidInput(
                "n, replications and grid size must be positive (grid at least 2)".into(),
            ));
        }
        Ok(())
    }
}

/// Metrics for one replication.
#[derive(Debug, Clone, Serialize)]
pub struct SimMetrics {
    pub replication: usize,
    pub error: Option<String>,
    pub ise_cov: f64,
    pub ise_eigenfunction: [f64; 3],
    pub se_eigenvalue: [f64; 3],
    pub sigma2_hat: f64,
    pub lambda: [f64; 2],
    pub runtime_seconds: f64,
}

impl SimMetrics {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub median: f64,
    pub iqr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            median: quantile_sorted(&v, 0.5),
            iqr: quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub config: SimConfig,
    pub sigma2_true: f64,
    pub n_ok: usize,
    pub n_fail: usize,
    pub runtime_seconds: f64,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub replications: Vec<SimMetrics>,
    pub summary: StudySummary,
}

/// Truth tabulated on the evaluation grid together with its eigenstructure.
pub struct TruthGrid {
    pub grid: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub eigen: EigenResult,
}

impl TruthGrid {
    pub fn new(truth: &Truth, g: usize) -> Self {
        let grid = quadrature_grid(g);
        let cov = truth.grid(&grid);
        let eigen = eigendecompose(&cov, &grid, true);
        Self { grid, cov, eigen }
    }
}

fn replicate(cfg: &SimConfig, truth: &Truth, tg: &TruthGrid, rep: usize) -> SimMetrics {
    let mut out = SimMetrics {
        replication: rep,
        error: None,
        ise_cov: f64::NAN,
        ise_eigenfunction: [f64::NAN; 3],
        se_eigenvalue: [f64::NAN; 3],
        sigma2_hat: f64::NAN,
        lambda: [f64::NAN; 2],
        runtime_seconds: 0.0,
    };
    let mut rng = replication_rng(cfg.seed, rep);
    let mut run = || -> Result<()> {
        let ds = generate(truth, cfg.n, cfg.m_set, &mut rng)?;
        let start = Instant::now();
        let fit = fit_two_step(&ds, &cfg.fit)?;
        out.runtime_seconds = start.elapsed().as_secs_f64();
        let est = eval_cov_grid(&fit.basis, &fit.theta, &tg.grid)?;
        out.ise_cov = ise_covariance(&est, &tg.cov)?;
        let eig = eigendecompose(&est, &tg.grid, true);
        let g = tg.grid.len();
        for l in 0..3 {
            let psi = tg.eigen.eigenfunctions.column(l).into_owned();
            let (psi_hat, lam_hat) = if l < eig.k() {
                (eig.eigenfunctions.column(l).into_owned(), eig.eigenvalues[l])
            } else {
                (DVector::zeros(g), 0.0)
            };
            let ise = ise_eigenfunction(&psi_hat, &psi)?;
            debug_assert!((0.0..=2.0 + 1e-9).contains(&ise));
            out.ise_eigenfunction[l] = ise;
            out.se_eigenvalue[l] = se_eigenvalue(lam_hat, tg.eigen.eigenvalues[l]);
        }
        out.sigma2_hat = fit.sigma2;
        out.lambda = fit.lambda;
        Ok(())
    };
    if let Err(e) = run() {
        warn!("replication {rep} failed: {e}");
        out.error = Some(e.to_string());
    }
    out
}

pub fn run_study(cfg: &SimConfig) -> Result<StudyOutput> {
    cfg.validate()?;
    let truth = Truth::new(cfg.case, cfg.snr, cfg.convention)?;
    let tg = TruthGrid::new(&truth, cfg.grid);
    let start = Instant::now();
    let reps: Vec<SimMetrics> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| replicate(cfg, &truth, &tg, r))
        .collect();
    let runtime_seconds = start.elapsed().as_secs_f64();
    let ok: Vec<&SimMetrics> = reps.iter().filter(|m| m.ok()).collect();
    let n_fail = reps.len() - ok.len();
    if n_fail > 0 {
        warn!("{n_fail} of {} replications failed and were excluded", reps.len());
    }
    let mut metrics = BTreeMap::new();
    let mut add = |name: String, f: &dyn Fn(&SimMetrics) -> f64| {
        let v: Vec<f64> = ok.iter().map(|m| f(m)).collect();
        if let Some(s) = Stat::of(&v) {
            metrics.insert(name, s);
        }
    };
    add("ise_cov".into(), &|m| m.ise_cov);
    for l in 0..3 {
        add(format!("ise_psi{}", l + 1), &move |m| m.ise_eigenfunction[l]);
        add(format!("se_lambda{}", l + 1), &move |m| m.se_eigenvalue[l]);
    }
    add("sigma2_hat".into(), &|m| m.sigma2_hat);
    info!("study finished in {runtime_seconds:.1} s");
    Ok(StudyOutput {
        summary: StudySummary {
            config: cfg.clone(),
            sigma2_true: truth.sigma2,
            n_ok: ok.len(),
            n_fail,
            runtime_seconds,
            metrics,
        },
        replications: reps,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    replication: usize,
    status: &'a str,
    ise_cov: f64,
    ise_psi1: f64,
    ise_psi2: f64,
    ise_psi3: f64,
    se_lambda1: f64,
    se_lambda2: f64,
    se_lambda3: f64,
    sigma2_hat: f64,
    lambda_step1: f64,
    lambda_step2: f64,
}

/// One row per replication. Runtimes are left out so reruns are byte-identical.
pub fn write_metrics_csv<W: Write>(reps: &[SimMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in reps {
        w.serialize(CsvRow {
            replication: m.replication,
            status: if m.ok() { "ok" } else { "failed" },
            ise_cov: m.ise_cov,
            ise_psi1: m.ise_eigenfunction[0],
            ise_psi2: m.ise_eigenfunction[1],
            ise_psi3: m.ise_eigenfunction[2],
            se_lambda1: m.se_eigenvalue[0],
            se_lambda2: m.se_eigenvalue[1],
            se_lambda3: m.se_eigenvalue[2],
            sigma2_hat: m.sigma2_hat,
            lambda_step1: m.lambda[0],
            lambda_step2: m.lambda[1],
        })?;
    }
    w.flush().map_err(|e| FaceError::Csv(e.into()))?;
    Ok(())
}
