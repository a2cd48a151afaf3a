//! Rolling-window factor regressions, factor-implied covariances and the
//! factor-model bootstrap generator `r = α̂ + β̂·F + σ̂ ⊙ ε`, `ε ~ N(0, I)`.

use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Panel;

/// One trading year.
pub const DEFAULT_WINDOW: usize = 252;
/// Three trading years, used by every benchmark covariance.
pub const BENCHMARK_WINDOW: usize = 756;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("singular regression design for asset {asset} at row {row}")]
    Singular { asset: usize, row: usize },
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, FactorError>;

/// Per-date factor-model coefficients for `N` assets and `K` factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub alpha: Vec<f64>,
    /// Row-major `N×K`: `beta[i*K + k]`.
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub num_factors: usize,
}

impl CoefficientSet {
    pub fn num_assets(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(&self.sigma).all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alpha.len();
        if self.sigma.len() != n || self.beta.len() != n * self.num_factors {
            return Err(FactorError::Dimension(format!(
                "alpha {}, beta {}, sigma {} for K={}",
                n,
                self.beta.len(),
                self.sigma.len(),
                self.num_factors
            )));
        }
        Ok(())
    }

    /// `α + β·F`, accumulated factor by factor in the generator's order.
    pub fn systematic(&self, factors: &[f64]) -> Vec<f64> {
        let k = self.num_factors;
        (0..self.num_assets())
            .map(|i| (0..k).fold(self.alpha[i], |acc, j| acc + self.beta[i * k + j] * factors[j]))
            .collect()
    }
}

/// Assemble `α + β·F_next + σ ⊙ ε`.
pub fn assemble_returns(coeffs: &CoefficientSet, factors_next: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    coeffs.validate()?;
    if factors_next.len() != coeffs.num_factors || eps.len() != coeffs.num_assets() {
        return Err(FactorError::Dimension(format!(
            "{} factors / {} shocks for N={}, K={}",
            factors_next.len(),
            eps.len(),
            coeffs.num_assets(),
            coeffs.num_factors
        )));
    }
    Ok(coeffs
        .systematic(factors_next)
        .into_iter()
        .zip(eps.iter().zip(&coeffs.sigma))
        .map(|(m, (e, s))| m + s * e)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Residual standard deviation with `n − K − 1` degrees of freedom.
    pub sigma: f64,
    pub residuals: Vec<f64>,
}

/// OLS of `y` on an intercept plus the regressors in `x` (one row per observation).
pub fn ols(y: &[f64], x: &[&[f64]]) -> Result<OlsFit> {
    let n = y.len();
    let k = x.first().map_or(0, |r| r.len());
    if x.len() != n {
        return Err(FactorError::Dimension(format!("{n} responses, {} regressor rows", x.len())));
    }
    if n < k + 2 {
        return Err(FactorError::Insufficient(format!("{n} observations for {k} factors")));
    }
    let p = k + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    // Centre the regressors so that the normal equations stay well scaled.
    let means: Vec<f64> = (0..k).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    for (row, &yv) in x.iter().zip(y) {
        let mut z = Vec::with_capacity(p);
        z.push(1.0);
        z.extend(row.iter().zip(&means).map(|(v, m)| v - m));
        for a in 0..p {
            xty[a] += z[a] * yv;
            for b in 0..p {
                xtx[(a, b)] += z[a] * z[b];
            }
        }
    }
    for j in 0..k {
        let var = xtx[(j + 1, j + 1)];
        let scale = x.iter().map(|r| r[j].abs()).fold(0.0, f64::max).max(1e-300);
        if var <= 1e-24 * scale * scale * n as f64 {
            return Err(FactorError::Singular { asset: 0, row: 0 });
        }
    }
    let chol = xtx.cholesky().ok_or(FactorError::Singular { asset: 0, row: 0 })?;
    let coef = chol.solve(&xty);
    let beta: Vec<f64> = (0..k).map(|j| coef[j + 1]).collect();
    let alpha = coef[0] - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let residuals: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(row, &yv)| yv - alpha - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let dof = (n - k - 1) as f64;
    let sigma = (residuals.iter().map(|e| e * e).sum::<f64>() / dof).sqrt();
    Ok(OlsFit { alpha, beta, sigma, residuals })
}

/// Per-date hatted coefficients from trailing-window regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingCoefficients {
    pub window: usize,
    pub dates: Vec<NaiveDate>,
    /// `None` until a full window of history exists.
    pub coefficients: Vec<Option<CoefficientSet>>,
}

impl RollingCoefficients {
    /// First row index with coefficients.
    pub fn first_valid(&self) -> Option<usize> {
        self.coefficients.iter().position(Option::is_some)
    }

    pub fn at(&self, t: usize) -> Option<&CoefficientSet> {
        self.coefficients.get(t).and_then(Option::as_ref)
    }
}

/// Regress each asset on the factors over rows `(t − window, t]` for every `t`.
///
/// Missing returns (`NaN`) are dropped from a window; a window with fewer than
/// `K + 2` observations yields no coefficients for that date.
pub fn rolling_ols(returns: &Panel, factors: &Panel, window: usize) -> Result<RollingCoefficients> {
    let (t_len, n, k) = (returns.rows(), returns.cols(), factors.cols());
    if factors.rows() != t_len {
        return Err(FactorError::Dimension("returns and factors differ in length".into()));
    }
    if window < k + 2 {
        return Err(FactorError::Insufficient(format!("window {window} too short for {k} factors")));
    }
    let mut coefficients = vec![None; t_len];
    for (t, slot) in coefficients.iter_mut().enumerate() {
        if t + 1 < window {
            continue;
        }
        let lo = t + 1 - window;
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n * k);
        let mut sigma = Vec::with_capacity(n);
        let mut complete = true;
        for i in 0..n {
            let rows: Vec<usize> = (lo..=t).filter(|&s| !returns.get(s, i).is_nan()).collect();
            if rows.len() < k + 2 {
                complete = false;
                break;
            }
            let y: Vec<f64> = rows.iter().map(|&s| returns.get(s, i)).collect();
            let x: Vec<&[f64]> = rows.iter().map(|&s| factors.row(s)).collect();
            let fit = ols(&y, &x).map_err(|e| match e {
                FactorError::Singular { .. } => FactorError::Singular { asset: i, row: t },
                other => other,
            })?;
            alpha.push(fit.alpha);
            beta.extend(fit.beta);
            sigma.push(fit.sigma);
        }
        if complete {
            *slot = Some(CoefficientSet { alpha, beta, sigma, num_factors: k });
        }
    }
    Ok(RollingCoefficients { window, dates: returns.dates.clone(), coefficients })
}

/// Sample covariance (denominator `n − 1`) of the rows of `data` (`n×d` row-major).
pub fn sample_covariance(data: &[f64], d: usize) -> DMatrix<f64> {
    let n = data.len() / d;
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in data.chunks(d) {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

/// `β̂ Σ_F β̂ᵀ + diag(σ̂²)` with `Σ_F` the sample covariance of the factor window.
pub fn factor_covariance(coeffs: &CoefficientSet, factor_window: &[f64]) -> Result<DMatrix<f64>> {
    coeffs.validate()?;
    let k = coeffs.num_factors;
    if factor_window.is_empty() || factor_window.len() % k != 0 {
        return Err(FactorError::Insufficient("factor window must hold whole rows".into()));
    }
    let sigma_f = if factor_window.len() / k >= 2 { sample_covariance(factor_window, k) } else { DMatrix::zeros(k, k) };
    let n = coeffs.num_assets();
    let beta = DMatrix::from_row_slice(n, k, &coeffs.beta);
    let mut cov = &beta * sigma_f * beta.transpose();
    for i in 0..n {
        cov[(i, i)] += coeffs.sigma[i] * coeffs.sigma[i];
    }
    let sym = (&cov + cov.transpose()) * 0.5;
    Ok(sym)
}

/// `num_samples × N` draws of `α̂ + β̂·F_next + σ̂ ⊙ ε` with `ε ~ N(0, I)`.
pub fn bootstrap_generate(coeffs: &CoefficientSet, factors_next: &[f64], num_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bootstrap_with_rng(coeffs, factors_next, num_samples, &mut rng)
}

pub fn bootstrap_with_rng(
    coeffs: &CoefficientSet,
    factors_next: &[f64],
    num_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    coeffs.validate()?;
    if !coeffs.is_finite() {
        return Err(FactorError::Dimension("coefficients must be finite".into()));
    }
    let n = coeffs.num_assets();
    let mut out = Vec::with_capacity(num_samples * n);
    let mut eps = vec![0.0; n];
    for _ in 0..num_samples {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        out.extend(assemble_returns(coeffs, factors_next, &eps)?);
    }
    Ok(out)
}

/// Long-format coefficient file: `date, asset, alpha, beta_1..K, sigma`.
pub fn write_coefficients(path: &Path, assets: &[String], rows: &[(NaiveDate, &CoefficientSet)]) -> Result<()> {
    let io = |e: csv::Error| FactorError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let k = rows.first().map_or(0, |r| r.1.num_factors);
    let mut header = vec!["date".to_string(), "asset".to_string(), "alpha".to_string()];
    header.extend((1..=k).map(|j| format!("beta_{j}")));
    header.push("sigma".into());
    w.write_record(&header).map_err(io)?;
    for (date, c) in rows {
        for (i, name) in assets.iter().enumerate() {
            let mut rec = vec![date.format("%Y-%m-%d").to_string(), name.clone(), format!("{:?}", c.alpha[i])];
            rec.extend((0..k).map(|j| format!("{:?}", c.beta[i * k + j])));
            rec.push(format!("{:?}", c.sigma[i]));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| FactorError::Io(e.to_string()))
}
