use marketgan::dataio::{simulate_market, FixtureSpec, SplitSpec};
use marketgan::factor::{factor_covariance, CoefficientSet};
use marketgan::portfolio::{
    backtest, benchmark_covariance, benchmark_weights, bootstrap_moments, forecast_factors, ledoit_wolf, run_backtest,
    sharpe, synthetic_moments, tangency_long_only, var1_forecast, CovarianceKind, ForecastMethod, ForecastSpec,
    Perturber, SyntheticSource,
};
use marketgan::train::TrainingData;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_problem(n: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
    let sigma = &a * a.transpose() / (n + 2) as f64 + DMatrix::identity(n, n) * 0.01;
    let mu = DVector::from_fn(n, |_, _| rng.random_range(-0.5..1.0));
    (mu, sigma)
}

fn grid_best(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let steps = 1000;
    let mut best = f64::NEG_INFINITY;
    let n = mu.len();
    let mut w = vec![0.0; n];
    if n == 2 {
        for i in 0..=steps {
            w[0] = i as f64 / steps as f64;
            w[1] = 1.0 - w[0];
            best = best.max(sharpe(&w, mu, sigma));
        }
    } else {
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                w[0] = i as f64 / steps as f64;
                w[1] = j as f64 / steps as f64;
                w[2] = 1.0 - w[0] - w[1];
                best = best.max(sharpe(&w, mu, sigma));
            }
        }
    }
    best
}

#[test]
fn tangency_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, count) in [(2, 50), (3, 6)] {
        for _ in 0..count {
            let (mut mu, sigma) = random_problem(n, &mut rng);
            mu[0] = mu[0].abs() + 0.05;
            let t = tangency_long_only(&mu, &sigma).unwrap();
            let ours = sharpe(&t.weights, &mu, &sigma);
            let grid = grid_best(&mu, &sigma);
            assert!(ours >= grid - 1e-4, "n={n}: {ours} vs grid {grid}");
            assert!(t.weights.iter().all(|w| *w >= 0.0));
            assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tangency_beats_vertices_and_equal_weight(seed in 0u64..10_000, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut mu, sigma) = random_problem(n, &mut rng);
        mu[n - 1] = mu[n - 1].abs() + 0.01;
        let t = tangency_long_only(&mu, &sigma).unwrap();
        let s = sharpe(&t.weights, &mu, &sigma);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            prop_assert!(s >= sharpe(&e, &mu, &sigma) - 1e-9);
        }
        prop_assert!(s >= sharpe(&vec![1.0 / n as f64; n], &mu, &sigma) - 1e-9);
    }

    #[test]
    fn tangency_is_scale_invariant(seed in 0u64..10_000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut mu, sigma) = random_problem(4, &mut rng);
        mu[0] = mu[0].abs() + 0.01;
        let w0 = tangency_long_only(&mu, &sigma).unwrap().weights;
        let w1 = tangency_long_only(&(&mu * a), &(&sigma * b)).unwrap().weights;
        for (x, y) in w0.iter().zip(&w1) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn ledoit_wolf_is_symmetric_positive_definite(seed in 0u64..10_000, t in 2usize..40, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * n).map(|_| rng.random_range(-0.05..0.05)).collect();
        let lw = ledoit_wolf(&data, n).unwrap();
        let c = &lw.covariance;
        prop_assert!((c - c.transpose()).amax() < 1e-15);
        let eig = c.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() > 0.0);
        // convex combination: eigenvalues lie between the sample extremes and the target
        let x = DMatrix::from_row_slice(t, n, &data);
        let means = x.row_mean();
        let xc = DMatrix::from_fn(t, n, |r, cc| x[(r, cc)] - means[cc]);
        let s = xc.transpose() * &xc / t as f64;
        let se = s.symmetric_eigen().eigenvalues;
        let lo = se.min().min(lw.target_scale);
        let hi = se.max().max(lw.target_scale);
        prop_assert!(eig.min() >= lo - 1e-15 && eig.max() <= hi + 1e-15);
    }
}

#[test]
fn ledoit_wolf_approaches_the_sample_covariance_for_large_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let draw = |t: usize, scales: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..t * n)
            .map(|j| {
                let e: f64 = StandardNormal.sample(rng);
                scales[j % n] * e
            })
            .collect()
    };
    let sample_cov = |data: &[f64]| {
        let t = data.len() / n;
        let x = DMatrix::from_row_slice(t, n, data);
        let means = x.row_mean();
        let xc = DMatrix::from_fn(t, n, |r, c| x[(r, c)] - means[c]);
        xc.transpose() * &xc / t as f64
    };
    // isotropic truth: target and sample agree in the limit
    let iso = draw(200_000, &[0.5; 4], &mut rng);
    let lw = ledoit_wolf(&iso, n).unwrap();
    let s = sample_cov(&iso);
    assert!((&lw.covariance - &s).norm() / s.norm() < 0.01);
    // anisotropic truth: the weight on the target itself vanishes
    let small = ledoit_wolf(&draw(50, &[1.0, 2.0, 3.0, 4.0], &mut rng), n).unwrap().intensity;
    let large = ledoit_wolf(&draw(200_000, &[1.0, 2.0, 3.0, 4.0], &mut rng), n).unwrap().intensity;
    assert!(large < small && large < 1e-3, "{small} {large}");
}

#[test]
fn constant_weights_reproduce_the_hand_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, n) = (50, 3);
    let r: Vec<f64> = (0..t * n).map(|_| rng.random_range(-0.03..0.03)).collect();
    let w = [0.2, 0.5, 0.3].repeat(t);
    let res = backtest(&r, &w, n, 0.0).unwrap();
    let mut wealth = 1.0;
    for s in 0..t {
        let p = 0.2 * r[s * n] + 0.5 * r[s * n + 1] + 0.3 * r[s * n + 2];
        assert!((res.returns[s] - p).abs() < 1e-15);
        wealth *= 1.0 + p;
    }
    let ours: f64 = res.returns.iter().map(|p| 1.0 + p).product();
    assert!((ours - wealth).abs() < 1e-14);
    // drift makes constant target weights trade a little every day
    assert!(res.report.daily_turnover > 0.0);
}

#[test]
fn missing_return_is_an_error() {
    let r = vec![0.01, f64::NAN];
    assert!(backtest(&r, &[1.0, 1.0], 1, 0.0).is_err());
    assert!(backtest(&[0.0, 0.0], &[0.7, 0.7], 1, 0.0).is_err());
}

#[test]
fn perturbation_hits_target_r2() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f: Vec<f64> = (0..200_000).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); 0.0003 + 0.01 * e }).collect();
    for r2 in [0.5, 0.1, 0.01] {
        let p = Perturber::from_history(&f, 1, r2).unwrap();
        let ft: Vec<f64> = f.iter().map(|x| p.perturb(&[*x], &mut rng)[0]).collect();
        let corr = marketgan::metrics::pearson(&f, &ft).unwrap();
        assert!((corr * corr - r2).abs() < 0.01, "{r2}: {}", corr * corr);
    }
    let p = Perturber::from_history(&f, 1, 1.0).unwrap();
    assert_eq!(p.perturb(&[0.123], &mut rng), vec![0.123]);
}

#[test]
fn var_recovers_an_ar1_forecast() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut f = vec![0.0];
    for _ in 0..20_000 {
        let prev = *f.last().unwrap();
        let e: f64 = StandardNormal.sample(&mut rng);
        f.push(0.001 + 0.6 * prev + 0.01 * e);
    }
    let last = *f.last().unwrap();
    let got = var1_forecast(&f, 1, 20_000).unwrap()[0];
    assert!((got - (0.001 + 0.6 * last)).abs() < 2e-4, "{got}");
}

#[test]
fn degenerate_bootstrap_moments() {
    let c = CoefficientSet { alpha: vec![0.001, 0.002], beta: vec![1.0, 0.5], sigma: vec![0.0, 0.0], num_factors: 1 };
    let (mu, sigma) = bootstrap_moments(&c, &[0.02], 100, 1).unwrap();
    assert!(sigma.amax() < 1e-30);
    assert!((mu[0] - 0.021).abs() < 1e-15 && (mu[1] - 0.012).abs() < 1e-15);
}

#[test]
fn bootstrap_moments_approach_diagonal_covariance() {
    let c = CoefficientSet { alpha: vec![0.0; 3], beta: vec![1.0, 0.5, -0.2], sigma: vec![0.01, 0.02, 0.03], num_factors: 1 };
    let (_, s1) = bootstrap_moments(&c, &[0.01], 10_000, 2).unwrap();
    let (_, s2) = bootstrap_moments(&c, &[0.01], 10_000, 2).unwrap();
    assert_eq!(s1, s2);
    let target = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 4e-4, 9e-4]));
    assert!((&s1 - &target).norm() / target.norm() < 0.05);
}

#[test]
fn factor_benchmark_matches_factor_module() {
    let fx = simulate_market(&FixtureSpec { num_assets: 3, num_dates: 300, ..FixtureSpec::default() }).unwrap();
    let r = &fx.dataset.returns.values;
    let f = &fx.dataset.factors.values;
    let cov = benchmark_covariance(r, 3, CovarianceKind::Factor, Some((f, 1))).unwrap();
    let x: Vec<&[f64]> = f.chunks(1).collect();
    let mut c = CoefficientSet { alpha: vec![0.0; 3], beta: vec![0.0; 3], sigma: vec![0.0; 3], num_factors: 1 };
    for i in 0..3 {
        let y: Vec<f64> = r.iter().skip(i).step_by(3).copied().collect();
        let fit = marketgan::factor::ols(&y, &x).unwrap();
        c.alpha[i] = fit.alpha;
        c.beta[i] = fit.beta[0];
        c.sigma[i] = fit.sigma;
    }
    assert!((cov - factor_covariance(&c, f).unwrap()).amax() < 1e-18);
    assert!(benchmark_covariance(&r[..3], 3, CovarianceKind::Sample, None).is_err());
}

#[test]
fn perturbed_r2_one_equals_realized_factor_backtest() {
    let fx = simulate_market(&FixtureSpec { num_assets: 3, num_dates: 420, seed: 7, residual_corr: 0.4, ..FixtureSpec::default() }).unwrap();
    let ds = fx.dataset;
    let split = SplitSpec::seven_to_one(61, 400);
    let data = TrainingData::prepare(&ds, 60, split.train.1).unwrap();
    let r = &ds.returns.values;
    let f = &ds.factors.values;
    let run = |spec: Option<ForecastSpec>| {
        let r2 = match &spec {
            Some(ForecastSpec { method: ForecastMethod::Perturbed { r2 }, .. }) => *r2,
            _ => 1.0,
        };
        let perturber = Perturber::from_history(f, 1, r2).unwrap();
        run_backtest(r, 3, (300, 400), 0.0, |t| {
            let f_next = match &spec {
                Some(spec) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ t as u64);
                    forecast_factors(f, 1, t, spec, Some(&perturber), &mut rng)?
                }
                None => f[t..t + 1].to_vec(),
            };
            let (mu, sigma) = synthetic_moments(SyntheticSource::Bootstrap, &data, t - 1, &f_next, 500, t as u64)?;
            Ok(tangency_long_only(&mu, &sigma)?.weights)
        })
        .unwrap()
    };
    let realized = run(None);
    let perturbed = run(Some(ForecastSpec { method: ForecastMethod::Perturbed { r2: 1.0 }, seed: 9 }));
    assert_eq!(realized, perturbed);
    let noisy = run(Some(ForecastSpec { method: ForecastMethod::Perturbed { r2: 0.01 }, seed: 9 }));
    assert_ne!(realized.weights, noisy.weights);
}

#[test]
fn benchmark_engine_runs_on_fixture() {
    let fx = simulate_market(&FixtureSpec { num_assets: 4, num_dates: 500, seed: 8, ..FixtureSpec::default() }).unwrap();
    let r = &fx.dataset.returns.values;
    let f = &fx.dataset.factors.values;
    for kind in [CovarianceKind::Sample, CovarianceKind::LedoitWolf, CovarianceKind::Factor] {
        let res = run_backtest(r, 4, (300, 500), 10.0, |t| benchmark_weights(r, f, 4, 1, t, 250, kind)).unwrap();
        assert_eq!(res.returns.len(), 200);
        assert!(res.report.max_drawdown <= 0.0);
        assert!(res.report.sharpe.is_some());
    }
}
