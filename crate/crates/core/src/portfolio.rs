//! Factor forecasts, synthetic-sample moments, long-only tangency portfolios,
//! benchmark covariances and daily backtests.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::{self, CoefficientSet, FactorError};
use crate::netgen::GeneratorModel;
use crate::train::{self, TrainError, TrainingData};

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing return for asset {asset} on row {row}")]
    MissingReturn { asset: usize, row: usize },
    #[error("invalid weights on row {row}: {detail}")]
    Weights { row: usize, detail: String },
    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, PortfolioError>;

pub const DEFAULT_SYNTHETIC_SAMPLES: usize = 10_000;
pub const R2_GRID: [f64; 5] = [1.0, 0.5, 0.1, 0.01, 0.001];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ForecastMethod {
    RollingAverage { window: usize },
    Var1 { window: usize },
    /// Realized factors plus Gaussian noise calibrated to a predictive R².
    Perturbed { r2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSpec {
    pub method: ForecastMethod,
    pub seed: u64,
}

impl ForecastSpec {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            ForecastMethod::RollingAverage { window } | ForecastMethod::Var1 { window } if window == 0 => {
                Err(PortfolioError::Input("forecast window must be positive".into()))
            }
            ForecastMethod::Perturbed { r2 } if !(r2 > 0.0 && r2 <= 1.0) => {
                Err(PortfolioError::Input(format!("target R² {r2} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.method {
            ForecastMethod::RollingAverage { window } => format!("rolling{window}"),
            ForecastMethod::Var1 { window } => format!("var{window}"),
            ForecastMethod::Perturbed { r2 } => format!("r2_{r2}"),
        }
    }
}

/// Column means of the trailing `window` rows of a `T×K` history.
pub fn rolling_average(history: &[f64], k: usize, window: usize) -> Result<Vec<f64>> {
    let rows = history.len() / k;
    if window == 0 || rows < window {
        return Err(PortfolioError::Input(format!("need {window} rows of factor history, have {rows}")));
    }
    let tail = &history[(rows - window) * k..];
    let mut out = vec![0.0; k];
    for row in tail.chunks(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= window as f64);
    Ok(out)
}

/// One-step VAR(1) forecast fitted by per-equation OLS on the trailing window.
///
/// A singular design falls back to the rolling average.
pub fn var1_forecast(history: &[f64], k: usize, window: usize) -> Result<Vec<f64>> {
    let rows = history.len() / k;
    if window < 2 || rows < window {
        return Err(PortfolioError::Input(format!("need {window} rows of factor history, have {rows}")));
    }
    let tail = &history[(rows - window) * k..];
    let x: Vec<&[f64]> = tail.chunks(k).take(window - 1).collect();
    let last = &tail[(window - 1) * k..];
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let y: Vec<f64> = tail.chunks(k).skip(1).map(|r| r[j]).collect();
        match factor::ols(&y, &x) {
            Ok(fit) => out.push(fit.alpha + fit.beta.iter().zip(last).map(|(b, f)| b * f).sum::<f64>()),
            Err(e) => {
                warn!("VAR design unusable ({e}); using the rolling average");
                return rolling_average(history, k, window);
            }
        }
    }
    Ok(out)
}

/// Adds `η ~ N(0, Var(F)(1−R²)/R²)` per factor to realized values.
#[derive(Debug, Clone)]
pub struct Perturber {
    noise: Vec<Option<Normal<f64>>>,
}

impl Perturber {
    pub fn new(factor_variance: &[f64], r2: f64) -> Result<Self> {
        if !(r2 > 0.0 && r2 <= 1.0) {
            return Err(PortfolioError::Input(format!("target R² {r2} outside (0, 1]")));
        }
        let noise = factor_variance
            .iter()
            .map(|&v| {
                let sd = (v * (1.0 - r2) / r2).sqrt();
                if sd > 0.0 {
                    Normal::new(0.0, sd).map(Some).map_err(|e| PortfolioError::Input(e.to_string()))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { noise })
    }

    /// Per-column sample variance of a `T×K` factor panel.
    pub fn from_history(history: &[f64], k: usize, r2: f64) -> Result<Self> {
        if history.len() < 2 * k {
            return Err(PortfolioError::Input("need two factor rows to calibrate noise".into()));
        }
        let cov = factor::sample_covariance(history, k);
        Self::new(&(0..k).map(|j| cov[(j, j)]).collect::<Vec<_>>(), r2)
    }

    pub fn perturb(&self, realized: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        realized
            .iter()
            .zip(&self.noise)
            .map(|(f, d)| match d {
                Some(d) => f + d.sample(rng),
                None => *f,
            })
            .collect()
    }
}

/// Sample mean and covariance (denominator `n − 1`) of `n×d` draws.
pub fn sample_moments(samples: &[f64], d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if d == 0 || samples.len() < 2 * d || samples.len() % d != 0 {
        return Err(PortfolioError::Input("need at least two whole sample rows".into()));
    }
    let n = samples.len() / d;
    let mut mean = DVector::<f64>::zeros(d);
    for row in samples.chunks(d) {
        for (j, v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n as f64;
    Ok((mean, factor::sample_covariance(samples, d)))
}

/// Source of synthetic next-day returns.
#[derive(Debug, Clone, Copy)]
pub enum SyntheticSource<'a> {
    Bootstrap,
    MarketGan(&'a GeneratorModel),
}

/// Moments of `num_samples` synthetic returns for date `s + 1` given factors `f_next`.
pub fn synthetic_moments(
    source: SyntheticSource<'_>,
    data: &TrainingData,
    s: usize,
    f_next: &[f64],
    num_samples: usize,
    seed: u64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let samples = match source {
        SyntheticSource::Bootstrap => {
            let c = data
                .coefficients(s)
                .ok_or_else(|| PortfolioError::Input(format!("no coefficients at row {s}")))?;
            factor::bootstrap_generate(c, f_next, num_samples, seed)?
        }
        SyntheticSource::MarketGan(m) => train::next_day_samples(m, data, s, f_next, num_samples, seed)?,
    };
    sample_moments(&samples, data.num_assets)
}

/// Bootstrap moments directly from a coefficient set.
pub fn bootstrap_moments(
    coeffs: &CoefficientSet,
    f_next: &[f64],
    num_samples: usize,
    seed: u64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let samples = factor::bootstrap_generate(coeffs, f_next, num_samples, seed)?;
    sample_moments(&samples, coeffs.num_assets())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tangency {
    pub weights: Vec<f64>,
    /// True when no asset had a positive expected return and the
    /// minimum-variance portfolio was returned instead.
    pub min_variance_fallback: bool,
}

pub fn sharpe(weights: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let w = DVector::from_column_slice(weights);
    let var = (w.transpose() * sigma * &w)[(0, 0)];
    w.dot(mu) / var.sqrt()
}

/// Long-only, fully invested portfolio of maximal Sharpe ratio.
///
/// Solves `min yᵀΣy` subject to `μᵀy = 1, y ≥ 0` with a primal active-set
/// method and normalizes `y` onto the simplex.
pub fn tangency_long_only(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Tangency> {
    let n = mu.len();
    if n == 0 || sigma.nrows() != n || sigma.ncols() != n {
        return Err(PortfolioError::Input("mean and covariance dimensions disagree".into()));
    }
    if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(PortfolioError::Input("non-finite moments".into()));
    }
    let mut s = (sigma + sigma.transpose()) * 0.5;
    let ridge = 1e-8 * s.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    for i in 0..n {
        s[(i, i)] += ridge;
    }
    let (target, fallback) = if mu.iter().any(|&m| m > 0.0) {
        (mu.clone(), false)
    } else {
        warn!("no asset has a positive expected return; using minimum-variance weights");
        (DVector::from_element(n, 1.0), true)
    };
    let y = active_set_qp(&s, &target)?;
    let total: f64 = y.iter().sum();
    let weights = y.iter().map(|v| v / total).collect();
    Ok(Tangency { weights, min_variance_fallback: fallback })
}

/// `min ½ yᵀSy` s.t. `aᵀy = 1`, `y ≥ 0`, for positive definite `S` and some `a_i > 0`.
fn active_set_qp(s: &DMatrix<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.len();
    // Feasible start at the single asset of best Sharpe ratio.
    let start = (0..n)
        .filter(|&i| a[i] > 0.0)
        .max_by(|&i, &j| (a[i] / s[(i, i)].sqrt()).total_cmp(&(a[j] / s[(j, j)].sqrt())))
        .ok_or_else(|| PortfolioError::Input("no positive target entry".into()))?;
    let mut y = DVector::<f64>::zeros(n);
    y[start] = 1.0 / a[start];
    let mut free: Vec<bool> = (0..n).map(|i| i == start).collect();
    let tol = 1e-12;
    for _ in 0..(50 * n + 100) {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let m = idx.len();
        let sff = DMatrix::from_fn(m, m, |r, c| s[(idx[r], idx[c])]);
        let af = DVector::from_fn(m, |r, _| a[idx[r]]);
        let chol = sff
            .cholesky()
            .ok_or_else(|| PortfolioError::Input("covariance is not positive definite".into()))?;
        let u = chol.solve(&af);
        let denom = af.dot(&u);
        let star = u / denom;
        let p: Vec<f64> = (0..m).map(|r| star[r] - y[idx[r]]).collect();
        let scale = y.amax().max(1e-300);
        if p.iter().all(|v| v.abs() <= 1e-13 * scale) {
            for r in 0..m {
                y[idx[r]] = star[r];
            }
            // multipliers of the active bounds: (Sy)_i − ν a_i with ν = yᵀSy
            let g = s * &y;
            let nu = y.dot(&g);
            let worst = (0..n)
                .filter(|&i| !free[i])
                .map(|i| (i, g[i] - nu * a[i]))
                .min_by(|x, y| x.1.total_cmp(&y.1));
            match worst {
                Some((i, lam)) if lam < -tol * nu.abs().max(1e-300) => free[i] = true,
                _ => return Ok(y.map(|v| v.max(0.0))),
            }
            continue;
        }
        let mut step = 1.0;
        let mut block = None;
        for r in 0..m {
            if p[r] < 0.0 {
                let t = -y[idx[r]] / p[r];
                if t < step {
                    step = t;
                    block = Some(idx[r]);
                }
            }
        }
        for r in 0..m {
            y[idx[r]] += step * p[r];
        }
        if let Some(i) = block {
            y[i] = 0.0;
            free[i] = false;
        }
    }
    Err(PortfolioError::Input("active-set iteration did not converge".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Sample,
    LedoitWolf,
    Factor,
}

impl CovarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceKind::Sample => "sample",
            CovarianceKind::LedoitWolf => "ledoit_wolf",
            CovarianceKind::Factor => "factor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedoitWolf {
    pub covariance: DMatrix<f64>,
    pub intensity: f64,
    pub target_scale: f64,
}

/// Shrinkage of the (1/T) sample covariance toward `μ̄I` with the
/// well-conditioned intensity `min(b̄², d²)/d²`.
pub fn ledoit_wolf(data: &[f64], n: usize) -> Result<LedoitWolf> {
    if n == 0 || data.is_empty() || data.len() % n != 0 {
        return Err(PortfolioError::Input("data must hold whole rows".into()));
    }
    let t = data.len() / n;
    let mut mean = vec![0.0; n];
    for row in data.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / t as f64;
        }
    }
    let x = DMatrix::from_fn(t, n, |r, c| data[r * n + c] - mean[c]);
    let sample = x.transpose() * &x / t as f64;
    let m = sample.trace() / n as f64;
    let target = DMatrix::<f64>::identity(n, n) * m;
    let d2 = (&sample - &target).norm_squared() / n as f64;
    let mut b2 = 0.0;
    for r in 0..t {
        let xr = x.row(r).transpose();
        b2 += (&xr * xr.transpose() - &sample).norm_squared() / n as f64;
    }
    b2 /= (t * t) as f64;
    let mut intensity = if d2 > 0.0 { (b2.min(d2) / d2).clamp(0.0, 1.0) } else { 1.0 };
    if t <= n {
        // singular sample; with T = 2 the b² estimate is identically zero
        intensity = intensity.max(1.0 / t as f64);
    }
    let covariance = &target * intensity + &sample * (1.0 - intensity);
    Ok(LedoitWolf { covariance, intensity, target_scale: m })
}

/// Covariance of a trailing return window (`T×N`), with the matching factor window for the factor kind.
pub fn benchmark_covariance(
    returns: &[f64],
    n: usize,
    kind: CovarianceKind,
    factors: Option<(&[f64], usize)>,
) -> Result<DMatrix<f64>> {
    if n == 0 || returns.len() % n != 0 || returns.len() / n < 2 {
        return Err(PortfolioError::Input("covariance window needs at least two rows".into()));
    }
    match kind {
        CovarianceKind::Sample => Ok(factor::sample_covariance(returns, n)),
        CovarianceKind::LedoitWolf => Ok(ledoit_wolf(returns, n)?.covariance),
        CovarianceKind::Factor => {
            let (f, k) = factors.ok_or_else(|| PortfolioError::Input("factor covariance needs factors".into()))?;
            let t = returns.len() / n;
            if f.len() != t * k {
                return Err(PortfolioError::Input("factor window does not match the return window".into()));
            }
            let x: Vec<&[f64]> = f.chunks(k).collect();
            let mut coeffs = CoefficientSet {
                alpha: vec![0.0; n],
                beta: vec![0.0; n * k],
                sigma: vec![0.0; n],
                num_factors: k,
            };
            for i in 0..n {
                let y: Vec<f64> = returns.iter().skip(i).step_by(n).copied().collect();
                let fit = factor::ols(&y, &x).map_err(|e| match e {
                    FactorError::Singular { row, .. } => FactorError::Singular { asset: i, row },
                    other => other,
                })?;
                coeffs.alpha[i] = fit.alpha;
                coeffs.beta[i * k..(i + 1) * k].copy_from_slice(&fit.beta);
                coeffs.sigma[i] = fit.sigma;
            }
            Ok(factor::factor_covariance(&coeffs, f)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    /// `None` when the return series has zero variance.
    pub sharpe: Option<f64>,
    pub annual_return: f64,
    pub annual_std: f64,
    /// Largest peak-to-trough loss of cumulative wealth (nonpositive).
    pub max_drawdown: f64,
    pub daily_turnover: f64,
    pub monthly_turnover: f64,
    pub cost_bps: f64,
    pub days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub num_assets: usize,
    /// Row `t` is held over return row `t`.
    pub weights: Vec<f64>,
    pub returns: Vec<f64>,
    /// Traded volume entering each day; zero on the first day.
    pub turnover: Vec<f64>,
    pub report: PerformanceReport,
}

pub const TRADING_DAYS: f64 = 252.0;
pub const DAYS_PER_MONTH: f64 = 21.0;

fn check_simplex(w: &[f64], row: usize) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < -1e-12) {
        return Err(PortfolioError::Weights { row, detail: "negative or non-finite weight".into() });
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PortfolioError::Weights { row, detail: format!("weights sum to {total}") });
    }
    Ok(())
}

/// Daily-rebalanced backtest of `T×N` weights against `T×N` returns.
///
/// Turnover on day `t` compares `w_t` with `w_{t−1}` drifted by day `t−1`
/// returns; costs of `cost_bps` per unit traded are subtracted from day `t`.
pub fn backtest(returns: &[f64], weights: &[f64], n: usize, cost_bps: f64) -> Result<BacktestResult> {
    if n == 0 || returns.len() != weights.len() || returns.len() % n != 0 || returns.is_empty() {
        return Err(PortfolioError::Input("returns and weights must be matching T×N panels".into()));
    }
    if cost_bps < 0.0 || !cost_bps.is_finite() {
        return Err(PortfolioError::Input("cost must be nonnegative".into()));
    }
    let t_len = returns.len() / n;
    let cost = cost_bps * 1e-4;
    let mut port = Vec::with_capacity(t_len);
    let mut turnover = Vec::with_capacity(t_len);
    let mut prev: Option<(usize, f64)> = None;
    for t in 0..t_len {
        let w = &weights[t * n..(t + 1) * n];
        let r = &returns[t * n..(t + 1) * n];
        check_simplex(w, t)?;
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return Err(PortfolioError::MissingReturn { asset: i, row: t });
        }
        let traded = match prev {
            None => 0.0,
            Some((p, gross)) => {
                let wp = &weights[p * n..(p + 1) * n];
                let rp = &returns[p * n..(p + 1) * n];
                (0..n).map(|i| (w[i] - wp[i] * (1.0 + rp[i]) / (1.0 + gross)).abs()).sum()
            }
        };
        let gross: f64 = w.iter().zip(r).map(|(a, b)| a * b).sum();
        port.push(gross - cost * traded);
        turnover.push(traded);
        prev = Some((t, gross));
    }
    let report = performance(&port, &turnover, cost_bps);
    Ok(BacktestResult { num_assets: n, weights: weights.to_vec(), returns: port, turnover, report })
}

fn performance(port: &[f64], turnover: &[f64], cost_bps: f64) -> PerformanceReport {
    let t = port.len() as f64;
    let mean = port.iter().sum::<f64>() / t;
    let var = if port.len() > 1 { port.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (t - 1.0) } else { 0.0 };
    let sd = var.sqrt();
    let sharpe = (sd > 0.0).then(|| mean / sd * TRADING_DAYS.sqrt());
    let (mut wealth, mut peak, mut mdd) = (1.0f64, 1.0f64, 0.0f64);
    for r in port {
        wealth *= 1.0 + r;
        peak = peak.max(wealth);
        mdd = mdd.min(wealth / peak - 1.0);
    }
    let daily_turnover = if turnover.len() > 1 { turnover[1..].iter().sum::<f64>() / (turnover.len() - 1) as f64 } else { 0.0 };
    PerformanceReport {
        sharpe,
        annual_return: mean * TRADING_DAYS,
        annual_std: sd * TRADING_DAYS.sqrt(),
        max_drawdown: mdd,
        daily_turnover,
        monthly_turnover: daily_turnover * DAYS_PER_MONTH,
        cost_bps,
        days: port.len(),
    }
}

/// Run a weight engine over rows `[a, b)` of a `T×N` return panel.
///
/// `engine(t)` must use information from rows before `t` only.
pub fn run_backtest<E>(returns: &[f64], n: usize, range: (usize, usize), cost_bps: f64, mut engine: E) -> Result<BacktestResult>
where
    E: FnMut(usize) -> Result<Vec<f64>>,
{
    let (a, b) = range;
    if b <= a || b * n > returns.len() {
        return Err(PortfolioError::Input(format!("invalid backtest range [{a}, {b})")));
    }
    let mut weights = Vec::with_capacity((b - a) * n);
    for t in a..b {
        let w = engine(t)?;
        if w.len() != n {
            return Err(PortfolioError::Weights { row: t, detail: format!("{} weights for {n} assets", w.len()) });
        }
        weights.extend(w);
    }
    backtest(&returns[a * n..b * n], &weights, n, cost_bps)
}

/// Weights for date `t` from the trailing `window` rows: historical mean and a benchmark covariance.
pub fn benchmark_weights(
    returns: &[f64],
    factors: &[f64],
    n: usize,
    k: usize,
    t: usize,
    window: usize,
    kind: CovarianceKind,
) -> Result<Vec<f64>> {
    if t < window {
        return Err(PortfolioError::Input(format!("row {t} has fewer than {window} rows of history")));
    }
    let r = &returns[(t - window) * n..t * n];
    let f = &factors[(t - window) * k..t * k];
    let (mu, _) = sample_moments(r, n)?;
    let sigma = benchmark_covariance(r, n, kind, Some((f, k)))?;
    Ok(tangency_long_only(&mu, &sigma)?.weights)
}

/// Factor forecast for date `t` from rows before `t` (or the perturbed realized value).
pub fn forecast_factors(
    factors: &[f64],
    k: usize,
    t: usize,
    spec: &ForecastSpec,
    perturber: Option<&Perturber>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let history = &factors[..t * k];
    match spec.method {
        ForecastMethod::RollingAverage { window } => rolling_average(history, k, window),
        ForecastMethod::Var1 { window } => var1_forecast(history, k, window),
        ForecastMethod::Perturbed { r2 } => {
            let realized = factors
                .get(t * k..(t + 1) * k)
                .ok_or_else(|| PortfolioError::Input(format!("no realized factors on row {t}")))?;
            if r2 == 1.0 {
                return Ok(realized.to_vec());
            }
            let p = perturber.ok_or_else(|| PortfolioError::Input("perturbed forecasts need calibrated noise".into()))?;
            Ok(p.perturb(realized, rng))
        }
    }
}

pub fn write_backtest(dir: &Path, result: &BacktestResult, dates: &[String], assets: &[String]) -> Result<()> {
    let io = |path: &Path, e: &dyn std::fmt::Display| PortfolioError::Io { path: path.display().to_string(), detail: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    let summary = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&result.report).map_err(|e| io(&summary, &e))?;
    std::fs::write(&summary, json).map_err(|e| io(&summary, &e))?;
    let path = dir.join("daily.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, &e))?;
    let mut header = vec!["date".to_string(), "return".to_string(), "turnover".to_string()];
    header.extend(assets.iter().map(|a| format!("w_{a}")));
    w.write_record(&header).map_err(|e| io(&path, &e))?;
    let n = result.num_assets;
    for (t, r) in result.returns.iter().enumerate() {
        let mut rec = vec![dates.get(t).cloned().unwrap_or_else(|| t.to_string()), format!("{r:?}"), format!("{:?}", result.turnover[t])];
        rec.extend(result.weights[t * n..(t + 1) * n].iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| io(&path, &e))?;
    }
    w.flush().map_err(|e| io(&path, &e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn symmetric_assets_split_evenly() {
        let t = tangency_long_only(&DVector::from_vec(vec![0.1, 0.1]), &diag(&[1.0, 1.0])).unwrap();
        assert!((t.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn negative_mean_asset_is_dropped() {
        let t = tangency_long_only(&DVector::from_vec(vec![0.1, -0.1]), &diag(&[1.0, 1.0])).unwrap();
        assert_eq!(t.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn diagonal_case_matches_closed_form() {
        let mu = [0.05, 0.02, 0.08];
        let var = [0.04, 0.01, 0.09];
        let t = tangency_long_only(&DVector::from_column_slice(&mu), &diag(&var)).unwrap();
        let raw: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| m / v).collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in t.weights.iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-6);
        }
    }

    #[test]
    fn all_negative_means_give_minimum_variance() {
        let t = tangency_long_only(&DVector::from_vec(vec![-0.1, -0.2]), &diag(&[1.0, 4.0])).unwrap();
        assert!(t.min_variance_fallback);
        assert!((t.weights[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn full_switch_turnover_is_two() {
        let r = vec![0.0; 4];
        let res = backtest(&r, &[1.0, 0.0, 0.0, 1.0], 2, 0.0).unwrap();
        assert_eq!(res.report.daily_turnover, 2.0);
        let res = backtest(&r, &[0.5, 0.5, 0.5, 0.5], 2, 0.0).unwrap();
        assert_eq!(res.report.daily_turnover, 0.0);
        assert_eq!(res.report.sharpe, None);
    }

    #[test]
    fn hand_backtest() {
        let res = backtest(&[0.01, -0.01, 0.0], &[1.0, 1.0, 1.0], 1, 0.0).unwrap();
        let mdd = 1.01 * 0.99 / 1.01 - 1.0;
        assert!((res.report.max_drawdown - mdd).abs() < 1e-15);
        let sd = (0.0001f64 * 2.0 / 2.0).sqrt();
        assert!((res.report.sharpe.unwrap() - 0.0).abs() < 1e-15);
        assert!((res.report.annual_std - sd * 252f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn costs_scale_with_traded_volume() {
        let r = vec![0.0; 4];
        let res = backtest(&r, &[1.0, 0.0, 0.0, 1.0], 2, 10.0).unwrap();
        assert_eq!(res.returns, vec![0.0, -0.002]);
    }

    #[test]
    fn constant_history_rolling_average() {
        let h = vec![0.3, -0.1].repeat(300);
        let close = |v: Vec<f64>| (v[0] - 0.3).abs() < 1e-12 && (v[1] + 0.1).abs() < 1e-12;
        assert!(close(rolling_average(&h, 2, 252).unwrap()));
        // VAR on a constant history is singular and falls back
        assert!(close(var1_forecast(&h, 2, 252).unwrap()));
    }

    #[test]
    fn single_observation_shrinks_fully() {
        let lw = ledoit_wolf(&[0.1, 0.2, 0.3], 3).unwrap();
        assert_eq!(lw.intensity, 1.0);
    }
}
