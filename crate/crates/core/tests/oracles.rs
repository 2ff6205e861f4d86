//! Property tests and independent reference checks across the pipeline.

use face::design::{build_design, raw_covariances};
use face::linalg::{sorted_eigen, unit_grid};
use face::oracle::{dense_igcv, isserlis_cov, random_instance, refit_icv, DenseProblem};
use face::predict::{predict_subject, Model};
use face::sim::matern::{bessel_k1, matern_cov};
use face::sim::{
    generate, run_study, MSet, SimCase, SimConfig, SnrConvention, Truth, TruthGrid, MATERN_NU, MATERN_PHI,
};
use face::solver::{
    cross_products, diagonalize, fit_step, objective_terms, solve_penalized, Block, Criterion, LambdaGrid,
    Weights,
};
use face::spectral::{eigendecompose, quadrature_grid, tabulate, DEFAULT_GRID};
use face::splines::{make_basis, vech, PenaltyMatrices, SplineBasis};
use face::weights::{blend_weights, covariance_of_products_matrix};
use face::{gcv, FitOptions, SparseFunctionalDataset, SubjectRecord};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_psd(r: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| r.random_range(-1.0..1.0));
    &a * a.transpose()
}

fn random_symmetric(r: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| r.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sorted_eigen(m);
    vals[vals.len() - 1]
}

fn subject_blocks(ds: &SparseFunctionalDataset, basis: &SplineBasis) -> Vec<Block> {
    build_design(ds, basis, raw_covariances(ds, |_| 0.0)).unwrap().blocks
}

fn case_one_data(seed: u64, n: usize) -> (SparseFunctionalDataset, Truth) {
    let truth = Truth::new(SimCase::Case1, 2.0, SnrConvention::Trace).unwrap();
    (generate(&truth, n, MSet::I1, &mut rng(seed)).unwrap(), truth)
}

// Reference values from an arbitrary-precision evaluation of K1.
#[test]
fn bessel_k1_matches_high_precision_values() {
    for (x, want) in [
        (0.5, 1.656_441_120_003_301),
        (3.0, 0.040_156_431_128_194_184),
        (12.0, 2.290_757_464_767_188e-6),
    ] {
        assert!((bessel_k1(x) - want).abs() <= 1e-10 * want, "K1({x})");
    }
    let c = matern_cov(MATERN_PHI, MATERN_PHI, MATERN_NU).unwrap();
    let want = 0.444_342_523_632_236_03;
    assert!((c - want).abs() <= 1e-10 * want);
    assert_eq!(matern_cov(0.0, MATERN_PHI, MATERN_NU).unwrap(), 1.0);
    assert!(matern_cov(0.01, MATERN_PHI, MATERN_NU).unwrap() > matern_cov(0.1, MATERN_PHI, MATERN_NU).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn penalty_matches_trace_form_and_is_psd(c in 3usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pm = PenaltyMatrices::new(c).unwrap();
        let theta = random_symmetric(&mut r, c);
        let v = vech(&theta);
        let quad = (v.transpose() * &pm.p * &v)[0];
        let trace = (&theta * &pm.d * pm.d.transpose() * theta.transpose()).trace();
        prop_assert!((quad - trace).abs() <= 1e-10 * trace.abs().max(1.0));
        let scale = pm.p.amax();
        prop_assert!(min_eigenvalue(&pm.p) >= -1e-10 * scale);
        let last = pm.q.nrows() - 1;
        prop_assert!(pm.q.row(last).iter().chain(pm.q.column(last).iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn bases_form_a_partition_of_unity(
        n_interior in 1usize..12,
        order in 2usize..5,
        seed in any::<u64>(),
        t in 0.0f64..=1.0,
    ) {
        let mut r = rng(seed);
        let times: Vec<f64> = (0..60).map(|_| r.random::<f64>()).collect();
        let basis = make_basis(&times, n_interior, order).unwrap();
        let b = basis.eval(t).unwrap();
        prop_assert!(b.iter().all(|&v| v >= 0.0));
        prop_assert!((b.sum() - 1.0).abs() < 1e-12);
        prop_assert!(b.iter().filter(|&&v| v > 0.0).count() <= order);
    }

    #[test]
    fn product_covariance_matches_moment_enumeration(m in 1usize..5, s2 in 0.0f64..2.0, seed in any::<u64>()) {
        let c = random_psd(&mut rng(seed), m);
        let gap = (isserlis_cov(&c, s2) - covariance_of_products_matrix(&c, s2)).amax();
        prop_assert!(gap <= 1e-10 * (1.0 + c.amax() + s2).powi(2));
    }

    #[test]
    fn blended_weights_are_symmetric_positive_definite(
        m in 1usize..7,
        s2 in 0.01f64..2.0,
        beta in 0.001f64..=1.0,
        seed in any::<u64>(),
    ) {
        let c = random_psd(&mut rng(seed), m);
        let w = blend_weights(&covariance_of_products_matrix(&c, s2), beta).unwrap();
        prop_assert_eq!(&w, &w.transpose());
        prop_assert!(min_eigenvalue(&w) > 0.0);
    }

    #[test]
    fn rescaling_is_idempotent_and_invertible(
        lo in -100.0f64..100.0,
        span in 0.01f64..1000.0,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let subjects: Vec<SubjectRecord> = (0..4)
            .map(|i| {
                let t: Vec<f64> = (0..3).map(|_| lo + span * r.random::<f64>()).collect();
                SubjectRecord::new(format!("s{i}"), t, vec![1.0, 2.0, 3.0]).unwrap()
            })
            .collect();
        let ds = SparseFunctionalDataset::new(subjects).unwrap();
        prop_assume!(ds.all_times().iter().any(|&t| t != ds.all_times()[0]));
        let once = ds.rescale_time().unwrap();
        let twice = once.rescale_time().unwrap();
        prop_assert_eq!(once.all_times(), twice.all_times());
        let (tmin, tmax) = once.all_times().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
        prop_assert_eq!((tmin, tmax), (0.0, 1.0));
        for (orig, unit) in ds.all_times().iter().zip(once.all_times()) {
            prop_assert!((once.to_original(unit) - orig).abs() <= 1e-12 * (orig.abs() + span));
        }
    }

    #[test]
    fn prediction_splits_and_shrinks_the_prior(seed in any::<u64>()) {
        let mut r = rng(seed);
        let basis = SplineBasis::from_interior_knots(vec![0.25, 0.5, 0.75], 4).unwrap();
        let c = basis.dim();
        let theta = random_psd(&mut r, c) / c as f64;
        let sigma2 = r.random_range(0.05..1.0);
        let mean = |t: f64| t * t;
        let m = r.random_range(1..6);
        let times: Vec<f64> = (0..m).map(|_| r.random::<f64>()).collect();
        let values: Vec<f64> = (0..m).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let rec = SubjectRecord::new("s", times, values).unwrap();
        let a: Vec<f64> = (0..3).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = (0..2).map(|_| r.random::<f64>()).collect();
        let both: Vec<f64> = a.iter().chain(&b).copied().collect();
        let model = Model { basis: &basis, theta: &theta, sigma2, mean: &mean };
        let joint = predict_subject(model, &rec, &both, true).unwrap();
        let first = predict_subject(model, &rec, &a, true).unwrap();
        let second = predict_subject(model, &rec, &b, true).unwrap();
        for k in 0..3 {
            prop_assert!((joint.x_hat[k] - first.x_hat[k]).abs() < 1e-10);
            prop_assert!((joint.cov[(k, k)] - first.cov[(k, k)]).abs() < 1e-10);
        }
        for k in 0..2 {
            prop_assert!((joint.x_hat[3 + k] - second.x_hat[k]).abs() < 1e-10);
        }
        let h = basis.design_matrix(&both).unwrap();
        let prior = &h * &theta * h.transpose();
        for k in 0..both.len() {
            prop_assert!(joint.cov[(k, k)] <= prior[(k, k)] + 1e-10);
        }
    }

    #[test]
    fn spectral_reconstruction_recovers_psd_grids(g in 3usize..30, rank in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = DMatrix::from_fn(g, rank, |_, _| r.random_range(-1.0..1.0));
        let c = &f * f.transpose();
        let grid = quadrature_grid(g);
        let e = eigendecompose(&c, &grid, false);
        let lam = DMatrix::from_diagonal(&DVector::from_vec(e.eigenvalues.clone()));
        let back = &e.eigenfunctions * lam * e.eigenfunctions.transpose();
        prop_assert!((back - &c).amax() < 1e-8 * (1.0 + c.amax()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fast_criterion_matches_literal_evaluation(seed in any::<u64>(), log_lambda in -4.0f64..8.0) {
        let mut r = rng(seed);
        let inst = loop {
            if let Ok(inst) = random_instance(&mut r, 8, 4, 5) {
                break inst;
            }
        };
        let blocks = &inst.design.blocks;
        let dg = diagonalize(&cross_products(blocks, &inst.weights).xtwx, &inst.q).unwrap();
        let pre = gcv::precompute(blocks, &inst.weights, &dg);
        let mut prob = DenseProblem::from_blocks(blocks, &inst.weights, &inst.q).unwrap();
        prob.ridge = dg.ridge;
        let lambda = 10f64.powf(log_lambda);
        let fast = gcv::igcv_value(&pre, &dg.s, lambda);
        let dense = dense_igcv(&prob, lambda).unwrap();
        prop_assert!((fast - dense).abs() <= 1e-8 * dense.abs());
    }
}

#[test]
fn criteria_coincide_without_a_design() {
    let mut r = rng(7);
    let inst = loop {
        if let Ok(inst) = random_instance(&mut r, 6, 4, 4) {
            break inst;
        }
    };
    let zeroed: Vec<Block> = inst
        .design
        .blocks
        .iter()
        .map(|b| Block { x: DMatrix::zeros(b.x.nrows(), b.x.ncols()), y: b.y.clone() })
        .collect();
    let mut prob = DenseProblem::from_blocks(&zeroed, &Weights::Identity, &inst.q).unwrap();
    prob.ridge = 1.0;
    let norm = prob.c_hat.norm_squared();
    for lambda in [0.0, 1.0, 1e6] {
        let igcv = dense_igcv(&prob, lambda).unwrap();
        let icv = refit_icv(&prob, lambda).unwrap();
        assert!((igcv - norm).abs() < 1e-12 * norm);
        assert!((icv - norm).abs() < 1e-12 * norm);
    }
}

#[test]
fn criterion_varies_smoothly_along_the_grid() {
    let (ds, _) = case_one_data(11, 100);
    let basis = make_basis(&ds.all_times(), 10, 4).unwrap();
    let blocks = subject_blocks(&ds, &basis);
    let q = PenaltyMatrices::new(basis.dim()).unwrap().q;
    let step = fit_step(&blocks, &Weights::Identity, &q, &LambdaGrid::default(), Criterion::Igcv).unwrap();
    let scores = &step.selection.scores;
    for w in scores.windows(2) {
        assert!((w[1] - w[0]).abs() < 0.1 * w[0], "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn doubling_the_grid_barely_moves_leading_eigenvalues() {
    let fitted = {
        let (ds, _) = case_one_data(3, 100);
        face::solver::fit_two_step(&ds, &FitOptions::default()).unwrap()
    };
    let case1 = Truth::new(SimCase::Case1, 2.0, SnrConvention::Trace).unwrap();
    let case2 = Truth::new(SimCase::Case2, 2.0, SnrConvention::Double).unwrap();
    let surfaces: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
        Box::new(move |s, t| case1.cov(s, t)),
        Box::new(move |s, t| case2.cov(s, t)),
        Box::new(|s: f64, t: f64| (-(s - t).powi(2) / 0.1).exp()),
        Box::new(move |s, t| fitted.covariance(s, t).unwrap()),
    ];
    for (k, cov) in surfaces.iter().enumerate() {
        let spectrum = |g: usize| {
            let grid = quadrature_grid(g);
            eigendecompose(&tabulate(cov, &grid), &grid, true).eigenvalues
        };
        let (coarse, fine) = (spectrum(101), spectrum(202));
        for l in 0..3 {
            assert!((coarse[l] - fine[l]).abs() < 1e-3, "surface {k}, eigenvalue {l}: {} vs {}", coarse[l], fine[l]);
        }
    }
}

#[test]
fn noiseless_constant_covariance_is_recovered() {
    // random intercepts standardized so the in-sample covariance is exactly one
    let mut r = rng(1);
    let raw: Vec<f64> = (0..400).map(|_| r.sample(StandardNormal)).collect();
    let mean = raw.iter().sum::<f64>() / 400.0;
    let sd = (raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 400.0).sqrt();
    let subjects: Vec<SubjectRecord> = raw
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let m = r.random_range(3..=7);
            let t: Vec<f64> = (0..m).map(|_| r.random::<f64>()).collect();
            SubjectRecord::new(format!("{i}"), t, vec![(a - mean) / sd; m]).unwrap()
        })
        .collect();
    let ds = SparseFunctionalDataset::with_domain(subjects, (0.0, 1.0)).unwrap();
    let fit = face::solver::fit_two_step(&ds, &FitOptions::default()).unwrap();
    let grid = quadrature_grid(DEFAULT_GRID);
    for &s in &grid {
        for &t in &grid {
            let v = fit.covariance(s, t).unwrap();
            assert!((v - 1.0).abs() < 0.05, "C({s}, {t}) = {v}");
        }
    }
    assert!(fit.sigma2 <= 0.02, "sigma2 = {}", fit.sigma2);
}

#[test]
fn mean_fit_of_centred_data_stays_near_zero() {
    let (ds, _) = case_one_data(17, 400);
    let mean = face::solver::fit_mean_pspline(&ds, &FitOptions::default()).unwrap();
    let sup = unit_grid(201).iter().map(|&t| mean.eval(t).abs()).fold(0.0, f64::max);
    assert!(sup <= 0.2, "sup |f| = {sup}");
}

#[test]
fn scaling_responses_scales_the_estimate_quadratically() {
    let (ds, _) = case_one_data(23, 60);
    let basis = make_basis(&ds.all_times(), 6, 4).unwrap();
    let q = PenaltyMatrices::new(basis.dim()).unwrap().q;
    let k = 3.7;
    let scaled = SparseFunctionalDataset::with_domain(
        ds.subjects()
            .iter()
            .map(|s| SubjectRecord::new(s.id.clone(), s.times.clone(), s.values.iter().map(|v| k * v).collect()).unwrap())
            .collect(),
        (0.0, 1.0),
    )
    .unwrap();
    let base = subject_blocks(&ds, &basis);
    let big = subject_blocks(&scaled, &basis);
    for lambda in [1e-3, 1.0, 1e3] {
        let a = solve_penalized(&cross_products(&base, &Weights::Identity), &q, lambda).unwrap();
        let b = solve_penalized(&cross_products(&big, &Weights::Identity), &q, lambda).unwrap();
        assert!((&b - &a * (k * k)).amax() <= 1e-8 * (k * k) * a.amax());
    }
}

#[test]
fn penalty_falls_and_fit_rises_along_the_grid() {
    let (ds, _) = case_one_data(29, 80);
    let basis = make_basis(&ds.all_times(), 8, 4).unwrap();
    let blocks = subject_blocks(&ds, &basis);
    let q = PenaltyMatrices::new(basis.dim()).unwrap().q;
    let cp = cross_products(&blocks, &Weights::Identity);
    let mut prev: Option<(f64, f64)> = None;
    for lambda in (LambdaGrid { min: 1e-4, max: 1e4, count: 30 }).values() {
        let alpha = solve_penalized(&cp, &q, lambda).unwrap();
        let (fit, pen) = objective_terms(&blocks, &Weights::Identity, &q, &alpha);
        if let Some((f0, p0)) = prev {
            assert!(fit >= f0 * (1.0 - 1e-9), "fit fell at lambda {lambda}");
            assert!(pen <= p0 * (1.0 + 1e-6) + 1e-12, "penalty rose at lambda {lambda}");
        }
        prev = Some((fit, pen));
    }
}

#[test]
fn identity_weight_blocks_reproduce_the_ordinary_fit() {
    let (ds, _) = case_one_data(31, 60);
    let basis = make_basis(&ds.all_times(), 6, 4).unwrap();
    let blocks = subject_blocks(&ds, &basis);
    let q = PenaltyMatrices::new(basis.dim()).unwrap().q;
    let eye = Weights::PerBlock(blocks.iter().map(|b| DMatrix::identity(b.y.len(), b.y.len())).collect());
    let grid = LambdaGrid::default();
    let ols = fit_step(&blocks, &Weights::Identity, &q, &grid, Criterion::Igcv).unwrap();
    let gls = fit_step(&blocks, &eye, &q, &grid, Criterion::Igcv).unwrap();
    assert_eq!(ols.selection.index, gls.selection.index);
    assert!((&ols.alpha - &gls.alpha).amax() <= 1e-10 * ols.alpha.amax());
}

#[test]
fn studies_are_reproducible_and_bounded() {
    let mut cfg = SimConfig::new(SimCase::Case1, 40, MSet::I1, 2.0, 3, 9);
    cfg.fit.grid.count = 20;
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    face::sim::write_metrics_csv(&a.replications, &mut csv_a).unwrap();
    face::sim::write_metrics_csv(&b.replications, &mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    for m in &a.replications {
        assert!(m.ok());
        assert!(m.ise_cov >= 0.0);
        for l in 0..3 {
            assert!((0.0..=2.0).contains(&m.ise_eigenfunction[l]));
            assert!(m.se_eigenvalue[l] >= 0.0);
        }
    }
}

/// Mean of `f` over observation pairs with its standard error.
fn pair_mean(ds: &SparseFunctionalDataset, f: impl Fn(f64, f64, f64, f64, bool) -> Option<f64>) -> (f64, f64) {
    let vals: Vec<f64> = ds
        .subjects()
        .iter()
        .flat_map(|s| {
            let f = &f;
            (0..s.len()).flat_map(move |j| {
                (j..s.len()).filter_map(move |k| f(s.times[j], s.times[k], s.values[j], s.values[k], j == k))
            })
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn simulated_noise_matches_its_calibration() {
    // E[y^2] - C(t, t) estimates the noise variance
    for (case, conv) in [(SimCase::Case1, SnrConvention::Trace), (SimCase::Case2, SnrConvention::Double)] {
        let truth = Truth::new(case, 2.0, conv).unwrap();
        let ds = generate(&truth, 210_000, MSet::I1, &mut rng(41)).unwrap();
        let (est, _) = pair_mean(&ds, |s, _, a, _, diag| diag.then(|| a * a - truth.cov(s, s)));
        assert!(ds.total_observations() >= 1_000_000);
        assert!((est / truth.sigma2 - 1.0).abs() < 0.02, "{case:?}: {est} vs {}", truth.sigma2);
    }
}

#[test]
fn simulated_products_have_the_true_covariance() {
    for (case, conv) in [(SimCase::Case1, SnrConvention::Trace), (SimCase::Case2, SnrConvention::Double)] {
        let truth = Truth::new(case, 2.0, conv).unwrap();
        let ds = generate(&truth, 100_000, MSet::I1, &mut rng(43)).unwrap();
        let (off, se_off) = pair_mean(&ds, |s, t, a, b, diag| (!diag).then(|| a * b - truth.cov(s, t)));
        assert!(off.abs() < 4.0 * se_off, "{case:?} off-diagonal: {off} (se {se_off})");
        let (on, se_on) = pair_mean(&ds, |s, _, a, _, diag| diag.then(|| a * a - truth.cov(s, s) - truth.sigma2));
        assert!(on.abs() < 4.0 * se_on, "{case:?} diagonal: {on} (se {se_on})");
    }
}

#[test]
fn truth_grids_carry_the_expected_spectra() {
    let tg = TruthGrid::new(&Truth::new(SimCase::Case2, 2.0, SnrConvention::Double).unwrap(), 101);
    assert!((tg.eigen.eigenvalues[0] - 0.209).abs() < 0.01);
    assert!((tg.eigen.eigenvalues[1] - 0.179).abs() < 0.01);
}
