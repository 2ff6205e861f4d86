//! Command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::artifact::FitArtifact;
use crate::dataset::{SparseFunctionalDataset, SubjectRecord};
use crate::error::{FaceError, Result};
use crate::predict::{confidence_bands, predict_subject, Model, DEFAULT_LEVEL};
use crate::sim::{self, MSet, SimCase, SimConfig, SnrConvention, Truth};
use crate::solver::{fit_two_step, Criterion, FitOptions, LambdaGrid};
use crate::spectral::{eigendecompose, eval_cov_grid, quadrature_grid, EigenResult, DEFAULT_GRID};

#[derive(Debug, Parser)]
#[command(name = "face", version, about = "Covariance estimation for sparse functional data")]
pub struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, env = "FACE_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit mean and covariance to a CSV of subject_id,time,value rows.
    Fit(FitArgs),
    /// Eigenvalues and eigenfunctions of a fitted (or true) covariance.
    Eigen(EigenArgs),
    /// Conditional predictions with pointwise bands.
    Predict(PredictArgs),
    /// Replication study on a simulation design.
    Simulate(SimulateArgs),
    /// Compare fast computations with slow reference implementations.
    #[cfg(feature = "testing")]
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitFlags {
    /// Interior knots of the covariance basis.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..=200))]
    pub knots: u32,
    /// Interior knots of the mean basis.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..=200))]
    pub mean_knots: u32,
    /// Spline order (4 = cubic).
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(2..=8))]
    pub order: u32,
    /// Weight on the diagonal of the product covariance in the GLS step.
    #[arg(long, default_value_t = crate::weights::DEFAULT_BETA, value_parser = unit_interval)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-6, value_parser = positive)]
    pub lambda_min: f64,
    #[arg(long, default_value_t = 1e6, value_parser = positive)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..=10000))]
    pub lambda_count: u32,
    /// Select lambda by exact leave-one-subject-out error (at most 5000 products).
    #[arg(long)]
    pub exact_icv: bool,
}

impl FitFlags {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            n_interior: self.knots as usize,
            order: self.order as usize,
            mean_n_interior: self.mean_knots as usize,
            beta: self.beta,
            grid: LambdaGrid { min: self.lambda_min, max: self.lambda_max, count: self.lambda_count as usize },
            criterion: if self.exact_icv { Criterion::ExactIcv } else { Criterion::Igcv },
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Points per axis of the stored covariance grid.
    #[arg(long, default_value_t = DEFAULT_GRID as u32, value_parser = clap::value_parser!(u32).range(2..=2001))]
    pub grid: u32,
    #[command(flatten)]
    pub flags: FitFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TruthArg {
    Case1,
    Case2,
}

#[derive(Debug, Args)]
pub struct EigenArgs {
    /// Fit artifact written by `face fit`.
    #[arg(long, required_unless_present = "truth", conflicts_with = "truth")]
    pub fit: Option<PathBuf>,
    /// Use a simulation truth instead of a fit.
    #[arg(long, value_enum)]
    pub truth: Option<TruthArg>,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID as u32, value_parser = clap::value_parser!(u32).range(2..=2001))]
    pub grid: u32,
    /// Number of components to write.
    #[arg(long, short, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Observations, subject_id,time,value.
    #[arg(long)]
    pub data: PathBuf,
    /// New times: a `time` column for every subject, or `subject_id,time` rows.
    #[arg(long)]
    pub times: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LEVEL, value_parser = open_unit_interval)]
    pub level: f64,
    /// Bands for the noise-free curve instead of new observations.
    #[arg(long)]
    pub latent: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MSetArg {
    I1,
    I2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConventionArg {
    Trace,
    Double,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub case: u8,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: u32,
    #[arg(long, value_enum, default_value = "i1")]
    pub m_set: MSetArg,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    pub snr: f64,
    /// How the noise variance follows from the SNR (default: trace for case 1, double for case 2).
    #[arg(long, value_enum)]
    pub snr_convention: Option<ConventionArg>,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
    pub reps: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_GRID as u32, value_parser = clap::value_parser!(u32).range(2..=2001))]
    pub grid: u32,
    /// Per-replication metrics CSV.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    pub summary: PathBuf,
    #[command(flatten)]
    pub flags: FitFlags,
}

#[cfg(feature = "testing")]
#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub instances: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is not a positive number"))
    }
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

fn open_unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1)"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| FaceError::Io { path: path.into(), source })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FaceError + '_ {
    move |source| FaceError::Io { path: path.into(), source }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Eigen(a) => cmd_eigen(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        #[cfg(feature = "testing")]
        Command::Validate(a) => cmd_validate(&a),
    }
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let ds = SparseFunctionalDataset::load_csv(&a.input)?;
    info!("loaded {} subjects, {} observations", ds.n(), ds.total_observations());
    let fit = fit_two_step(&ds, &a.flags.options())?;
    info!("lambda = {:e} / {:e}, sigma2 = {:e}", fit.lambda[0], fit.lambda[1], fit.sigma2);
    FitArtifact::from_fit(&fit, a.grid as usize)?.save(&a.output)
}

fn truth_eigen(truth: TruthArg, g: usize) -> Result<EigenResult> {
    let case = match truth {
        TruthArg::Case1 => SimCase::Case1,
        TruthArg::Case2 => SimCase::Case2,
    };
    let t = Truth::new(case, 1.0, case.default_convention())?;
    let grid = quadrature_grid(g);
    Ok(eigendecompose(&t.grid(&grid), &grid, true))
}

pub fn cmd_eigen(a: &EigenArgs) -> Result<()> {
    let g = a.grid as usize;
    let (eig, lo, span) = match (&a.fit, a.truth) {
        (Some(path), _) => {
            let art = FitArtifact::load(path)?;
            let grid = quadrature_grid(g);
            let c = eval_cov_grid(&art.basis, &art.theta(), &grid)?;
            (eigendecompose(&c, &grid, true), art.time_domain[0], art.span())
        }
        (None, Some(t)) => (truth_eigen(t, g)?, 0.0, 1.0),
        (None, None) => unreachable!("clap requires --fit or --truth"),
    };
    let mut k = a.k as usize;
    if k > eig.k() {
        warn!("only {} positive eigenvalues; writing {} components instead of {k}", eig.k(), eig.k());
        k = eig.k();
    }
    // rescale so the operator acts on the original time axis
    let mut w = csv::Writer::from_writer(create(&a.output)?);
    w.write_record(["component", "eigenvalue", "time", "eigenfunction"])?;
    for l in 0..k {
        let value = eig.eigenvalues[l] * span;
        for (i, &t) in eig.grid.iter().enumerate() {
            w.write_record([
                (l + 1).to_string(),
                value.to_string(),
                (lo + t * span).to_string(),
                (eig.eigenfunctions[(i, l)] / span.sqrt()).to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&a.output))?;
    Ok(())
}

/// New times per subject: either one shared `time` column or `subject_id,time` rows.
fn read_new_times(path: &Path, ds: &SparseFunctionalDataset) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let parse = |row: usize, raw: &str| -> Result<f64> {
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| FaceError::Parse { row, message: format!("time is {raw:?}") })
    };
    match cols.as_slice() {
        ["time"] => {
            let mut times = Vec::new();
            for (k, rec) in rdr.records().enumerate() {
                times.push(parse(k + 1, rec?.get(0).unwrap_or(""))?);
            }
            Ok(ds.subjects().iter().map(|s| (s.id.clone(), times.clone())).collect())
        }
        ["subject_id", "time"] => {
            let mut out: Vec<(String, Vec<f64>)> = Vec::new();
            for (k, rec) in rdr.records().enumerate() {
                let rec = rec?;
                let id = rec.get(0).unwrap_or("").to_string();
                if ds.subject(&id).is_none() {
                    return Err(FaceError::UnknownSubject(id));
                }
                let t = parse(k + 1, rec.get(1).unwrap_or(""))?;
                match out.iter_mut().find(|(i, _)| *i == id) {
                    Some((_, v)) => v.push(t),
                    None => out.push((id, vec![t])),
                }
            }
            Ok(out)
        }
        _ => Err(FaceError::Parse {
            row: 0,
            message: format!("expected header `time` or `subject_id,time`, got {:?}", headers.iter().collect::<Vec<_>>().join(",")),
        }),
    }
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let art = FitArtifact::load(&a.fit)?;
    let ds = SparseFunctionalDataset::load_csv(&a.data)?;
    let requests = read_new_times(&a.times, &ds)?;
    let theta = art.theta();
    let mean_fit = art.mean.clone();
    let mean = move |t: f64| mean_fit.eval(t);
    let model = Model { basis: &art.basis, theta: &theta, sigma2: art.sigma2, mean: &mean };

    let mut w = csv::Writer::from_writer(create(&a.output)?);
    w.write_record(["subject_id", "time", "x_hat", "lo", "hi"])?;
    for (id, new_times) in &requests {
        let rec = ds.subject(id).ok_or_else(|| FaceError::UnknownSubject(id.clone()))?;
        let unit_obs = rec.times.iter().map(|&t| art.to_unit(t)).collect::<Result<Vec<_>>>()?;
        let unit_rec = SubjectRecord::new(rec.id.clone(), unit_obs, rec.values.clone())?;
        let unit_new = new_times.iter().map(|&t| art.to_unit(t)).collect::<Result<Vec<_>>>()?;
        let mut pred = predict_subject(model, &unit_rec, &unit_new, a.latent)?;
        confidence_bands(&mut pred, a.level)?;
        for (k, &t) in new_times.iter().enumerate() {
            w.write_record([
                id.clone(),
                t.to_string(),
                pred.x_hat[k].to_string(),
                pred.band_lo[k].to_string(),
                pred.band_hi[k].to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&a.output))?;
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let case = if a.case == 1 { SimCase::Case1 } else { SimCase::Case2 };
    let mut cfg = SimConfig::new(
        case,
        a.n as usize,
        match a.m_set {
            MSetArg::I1 => MSet::I1,
            MSetArg::I2 => MSet::I2,
        },
        a.snr,
        a.reps as usize,
        a.seed,
    );
    cfg.grid = a.grid as usize;
    cfg.fit = a.flags.options();
    if let Some(c) = a.snr_convention {
        cfg.convention = match c {
            ConventionArg::Trace => SnrConvention::Trace,
            ConventionArg::Double => SnrConvention::Double,
        };
    }
    let out = sim::run_study(&cfg)?;
    sim::write_metrics_csv(&out.replications, create(&a.output)?)?;
    let mut f = create(&a.summary)?;
    serde_json::to_writer_pretty(&mut f, &out.summary)?;
    writeln!(f).map_err(io_err(&a.summary))?;
    f.flush().map_err(io_err(&a.summary))?;
    if let Some(s) = out.summary.metrics.get("ise_cov") {
        println!("ise_cov median {:.4} iqr {:.4} ({} ok, {} failed)", s.median, s.iqr, out.summary.n_ok, out.summary.n_fail);
    }
    Ok(())
}

#[cfg(feature = "testing")]
pub fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    let n = a.instances as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let lambdas = [0.0, 0.37, 10.0, 1e3, 1e12];
    let checks: Vec<(&str, f64, f64)> = vec![
        ("fast iGCV vs dense criterion (rel)", oracle::igcv_agreement(&mut rng, n, &lambdas)?, 1e-8),
        ("exact iCV vs refits (rel)", oracle::icv_agreement(&mut rng, n, &[0.01, 1.0, 100.0])?, 1e-6),
        ("product covariance vs moment enumeration (abs)", oracle::isserlis_agreement(&mut rng, n, 4), 1e-10),
        ("prediction vs Gaussian conditioning (abs)", oracle::prediction_agreement(&mut rng, n)?, 1e-10),
    ];
    let mut failed = 0;
    for (name, err, tol) in &checks {
        let ok = err <= tol;
        failed += usize::from(!ok);
        println!("{} {name}: {err:.3e} (tol {tol:.0e})", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(FaceError::InvalidInput(format!("{failed} validation check(s) failed")));
    }
    Ok(())
}
