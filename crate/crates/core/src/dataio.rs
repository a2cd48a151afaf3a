//! Return, factor and covariate panels: CSV ingestion, forward fill of
//! monthly covariates, imputation of missing returns, train/validation
//! splits and the simulated-market fixture.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::{self, CoefficientSet};

/// Names of the eight macro predictors used as conditioning covariates.
pub const COVARIATE_NAMES: [&str; 8] = ["dp", "ep", "bm", "tbl", "tms", "dfy", "ntis", "svar"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("io error in {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at {path} row {row}: {detail}")]
    Parse { path: String, row: usize, detail: String },
    #[error("no covariate observation on or before {0}")]
    Coverage(NaiveDate),
    #[error("calendar mismatch: {0}")]
    Calendar(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Date-indexed `T×N` matrix stored row-major; missing cells are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub dates: Vec<NaiveDate>,
    pub columns: Vec<String>,
    pub values: Vec<f64>,
}

impl Panel {
    pub fn new(dates: Vec<NaiveDate>, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if dates.len() * columns.len() != values.len() {
            return Err(DataError::Invalid(format!(
                "{} dates x {} columns does not match {} values",
                dates.len(),
                columns.len(),
                values.len()
            )));
        }
        Ok(Self { dates, columns, values })
    }

    pub fn rows(&self) -> usize {
        self.dates.len()
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.cols() + j]
    }

    pub fn set(&mut self, t: usize, j: usize, v: f64) {
        let n = self.cols();
        self.values[t * n + j] = v;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.cols();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|t| self.get(t, j)).collect()
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Panel {
        let n = self.cols();
        Panel {
            dates: self.dates[start..end].to_vec(),
            columns: self.columns.clone(),
            values: self.values[start * n..end * n].to_vec(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Panel {
        let mut values = Vec::with_capacity(self.rows() * cols.len());
        for t in 0..self.rows() {
            values.extend(cols.iter().map(|&j| self.get(t, j)));
        }
        Panel { dates: self.dates.clone(), columns: cols.iter().map(|&j| self.columns[j].clone()).collect(), values }
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }
}

/// Returns, factors and covariates on one shared trading calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketDataset {
    pub returns: Panel,
    pub factors: Panel,
    pub covariates: Panel,
    /// `T×N`, true where the return was not observed.
    pub missing_mask: Vec<bool>,
}

impl MarketDataset {
    pub fn new(returns: Panel, factors: Panel, covariates: Panel) -> Result<Self> {
        if returns.dates != factors.dates || returns.dates != covariates.dates {
            return Err(DataError::Calendar("returns, factors and covariates must share dates".into()));
        }
        if factors.has_missing() || covariates.has_missing() {
            return Err(DataError::Invalid("factors and covariates may not contain missing values".into()));
        }
        let missing_mask = returns.values.iter().map(|v| v.is_nan()).collect();
        Ok(Self { returns, factors, covariates, missing_mask })
    }

    pub fn calendar(&self) -> &[NaiveDate] {
        &self.returns.dates
    }

    pub fn len(&self) -> usize {
        self.returns.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_assets(&self) -> usize {
        self.returns.cols()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.cols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.cols()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> MarketDataset {
        let n = self.num_assets();
        MarketDataset {
            returns: self.returns.slice_rows(start, end),
            factors: self.factors.slice_rows(start, end),
            covariates: self.covariates.slice_rows(start, end),
            missing_mask: self.missing_mask[start * n..end * n].to_vec(),
        }
    }

    /// Keep only the first `k` factor columns.
    pub fn with_factor_count(&self, k: usize) -> Result<MarketDataset> {
        if k == 0 || k > self.num_factors() {
            return Err(DataError::Invalid(format!("requested {k} factors, dataset has {}", self.num_factors())));
        }
        let mut out = self.clone();
        out.factors = self.factors.select_columns(&(0..k).collect::<Vec<_>>());
        Ok(out)
    }
}

/// In-sample z-scoring of covariate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on rows `[0, end)`; zero-variance columns keep unit scale.
    pub fn fit(panel: &Panel, end: usize) -> Self {
        let d = panel.cols();
        let n = end.max(1) as f64;
        let mut mean = vec![0.0; d];
        for t in 0..end {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += panel.get(t, j) / n;
            }
        }
        let mut var = vec![0.0; d];
        for t in 0..end {
            for j in 0..d {
                var[j] += (panel.get(t, j) - mean[j]).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn transform(&self, panel: &Panel) -> Panel {
        let mut out = panel.clone();
        let d = panel.cols();
        for (i, v) in out.values.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }
}

/// Contiguous training and validation row ranges (validation is the most recent block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (usize, usize),
    pub validation: (usize, usize),
}

impl SplitSpec {
    /// 7:1 split of rows `[start, end)` by count.
    pub fn seven_to_one(start: usize, end: usize) -> Self {
        let n = end - start;
        let n_train = (n * 7 + 4) / 8;
        Self { train: (start, start + n_train), validation: (start + n_train, end) }
    }
}

fn parse_cell(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    if s.is_empty() || s == "NA" {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|_| format!("non-numeric cell {s:?}"))
}

/// Strict CSV reader: ISO date in the first column, numeric cells, `""`/`NA` for missing.
pub fn read_panel(path: &Path) -> Result<Panel> {
    let p = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|source| DataError::Csv { path: p.clone(), source })?;
    let headers = rdr.headers().map_err(|source| DataError::Csv { path: p.clone(), source })?.clone();
    if headers.len() < 2 {
        return Err(DataError::Parse { path: p, row: 0, detail: "need a date column and at least one value column".into() });
    }
    let columns: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| DataError::Csv { path: p.clone(), source })?;
        let row = i + 2;
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
            .map_err(|e| DataError::Parse { path: p.clone(), row, detail: format!("bad date {:?}: {e}", &rec[0]) })?;
        if dates.last().is_some_and(|&last| last >= date) {
            return Err(DataError::Parse { path: p.clone(), row, detail: "dates must be strictly increasing".into() });
        }
        dates.push(date);
        for cell in rec.iter().skip(1) {
            values.push(parse_cell(cell).map_err(|detail| DataError::Parse { path: p.clone(), row, detail })?);
        }
    }
    Panel::new(dates, columns, values)
}

pub fn write_panel(path: &Path, panel: &Panel) -> Result<()> {
    let p = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| DataError::Csv { path: p.clone(), source })?;
    let mut header = vec!["date".to_string()];
    header.extend(panel.columns.iter().cloned());
    w.write_record(&header).map_err(|source| DataError::Csv { path: p.clone(), source })?;
    for t in 0..panel.rows() {
        let mut rec = vec![panel.dates[t].format("%Y-%m-%d").to_string()];
        rec.extend(panel.row(t).iter().map(|v| if v.is_nan() { "NA".to_string() } else { format!("{v:?}") }));
        w.write_record(&rec).map_err(|source| DataError::Csv { path: p.clone(), source })?;
    }
    w.flush().map_err(|source| DataError::Io { path: p, source })
}

/// Carry the most recent observation onto every calendar date.
pub fn forward_fill_covariates(raw: &Panel, calendar: &[NaiveDate]) -> Result<Panel> {
    let d = raw.cols();
    let mut values = Vec::with_capacity(calendar.len() * d);
    let mut latest: Vec<f64> = vec![f64::NAN; d];
    let mut next = 0;
    for &date in calendar {
        while next < raw.rows() && raw.dates[next] <= date {
            for (j, slot) in latest.iter_mut().enumerate() {
                let v = raw.get(next, j);
                if !v.is_nan() {
                    *slot = v;
                }
            }
            next += 1;
        }
        if latest.iter().any(|v| v.is_nan()) {
            return Err(DataError::Coverage(date));
        }
        values.extend_from_slice(&latest);
    }
    Panel::new(calendar.to_vec(), raw.columns.clone(), values)
}

/// Load the CSV panels; covariates are forward-filled onto the return calendar
/// and an optional risk-free column is subtracted from every return.
pub fn load_dataset(
    returns_path: &Path,
    factors_path: &Path,
    covariates_path: &Path,
    risk_free_path: Option<&Path>,
) -> Result<MarketDataset> {
    let mut returns = read_panel(returns_path)?;
    let factors = read_panel(factors_path)?;
    let raw_cov = read_panel(covariates_path)?;
    if factors.dates != returns.dates {
        return Err(DataError::Calendar("factor dates differ from return dates".into()));
    }
    if let Some(rf_path) = risk_free_path {
        let rf = read_panel(rf_path)?;
        if rf.dates != returns.dates || rf.cols() != 1 {
            return Err(DataError::Calendar("risk-free file must have one column on the return calendar".into()));
        }
        let n = returns.cols();
        for t in 0..returns.rows() {
            let r = rf.get(t, 0);
            for j in 0..n {
                let v = returns.get(t, j) - r;
                returns.set(t, j, v);
            }
        }
    }
    let covariates = forward_fill_covariates(&raw_cov, &returns.dates)?;
    MarketDataset::new(returns, factors, covariates)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Outcome of [`impute_missing_returns`].
#[derive(Debug, Clone)]
pub struct Imputation {
    pub returns: Panel,
    /// Assets that had no usable observations and were left untouched.
    pub excluded: Vec<usize>,
}

/// Fill missing returns with `α + β·F`, where `(α, β)` is the average of
/// the per-date coefficient estimates at the `k_neighbors` observed dates
/// nearest in standardized covariate space.
///
/// Per-date estimates come from a one-year rolling regression over observed
/// rows, falling back to the full-sample regression where the window is too
/// thin. Observed cells are never modified.
pub fn impute_missing_returns(dataset: &MarketDataset, k_neighbors: usize) -> Result<Imputation> {
    let t_len = dataset.len();
    let n = dataset.num_assets();
    let k = dataset.num_factors();
    let std = Standardizer::fit(&dataset.covariates, t_len);
    let cov = std.transform(&dataset.covariates);
    let mut out = dataset.returns.clone();
    let mut excluded = Vec::new();
    for i in 0..n {
        let missing: Vec<usize> = (0..t_len).filter(|&t| dataset.missing_mask[t * n + i]).collect();
        if missing.is_empty() {
            continue;
        }
        let observed: Vec<usize> = (0..t_len).filter(|&t| !dataset.missing_mask[t * n + i]).collect();
        if observed.len() < k + 2 {
            warn!("asset {} has {} observed rows; excluded from imputation", dataset.returns.columns[i], observed.len());
            excluded.push(i);
            continue;
        }
        let y: Vec<f64> = observed.iter().map(|&t| dataset.returns.get(t, i)).collect();
        let x: Vec<&[f64]> = observed.iter().map(|&t| dataset.factors.row(t)).collect();
        let full = match factor::ols(&y, &x) {
            Ok(fit) => fit,
            Err(e) => {
                warn!("asset {}: full-sample regression failed ({e}); excluded", dataset.returns.columns[i]);
                excluded.push(i);
                continue;
            }
        };
        let per_date: Vec<(f64, Vec<f64>)> = observed
            .iter()
            .map(|&t| {
                let lo = t.saturating_sub(factor::DEFAULT_WINDOW - 1);
                let rows: Vec<usize> = (lo..=t).filter(|&s| !dataset.missing_mask[s * n + i]).collect();
                if rows.len() >= factor::DEFAULT_WINDOW / 2 {
                    let yy: Vec<f64> = rows.iter().map(|&s| dataset.returns.get(s, i)).collect();
                    let xx: Vec<&[f64]> = rows.iter().map(|&s| dataset.factors.row(s)).collect();
                    if let Ok(fit) = factor::ols(&yy, &xx) {
                        return (fit.alpha, fit.beta);
                    }
                }
                (full.alpha, full.beta.clone())
            })
            .collect();
        for &t in &missing {
            let mut dists: Vec<(f64, usize)> =
                observed.iter().enumerate().map(|(idx, &s)| (sq_dist(cov.row(t), cov.row(s)), idx)).collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let m = k_neighbors.max(1).min(dists.len());
            let mut alpha = 0.0;
            let mut beta = vec![0.0; k];
            for &(_, idx) in &dists[..m] {
                alpha += per_date[idx].0 / m as f64;
                for (b, v) in beta.iter_mut().zip(&per_date[idx].1) {
                    *b += v / m as f64;
                }
            }
            let f = dataset.factors.row(t);
            let fill = alpha + beta.iter().zip(f).map(|(b, x)| b * x).sum::<f64>();
            out.set(t, i, fill);
        }
    }
    Ok(Imputation { returns: out, excluded })
}

/// Ground-truth process for the simulated market.
///
/// Returns follow `r_{t+1} = α + β_t·F_{t+1} + σ_t ⊙ ε_{t+1}` with
/// AR(1) loading drift, AR(1) log-volatility with a leverage term, and
/// equicorrelated residual shocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub num_assets: usize,
    pub num_factors: usize,
    pub num_dates: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Loadings are spread evenly over `[beta_low, beta_high]` across assets.
    pub beta_low: f64,
    pub beta_high: f64,
    pub beta_persistence: f64,
    pub beta_innovation: f64,
    pub factor_mean: f64,
    pub factor_vol: f64,
    /// Average idiosyncratic volatility; zero switches residuals off.
    pub sigma: f64,
    pub vol_persistence: f64,
    pub vol_innovation: f64,
    /// Loading of log-volatility innovations on the negative residual shock.
    pub leverage: f64,
    /// Pairwise correlation of residual shocks.
    pub residual_corr: f64,
    /// Month-to-month persistence of the covariate AR(1) states.
    pub covariate_persistence: f64,
    pub start: NaiveDate,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            num_assets: 5,
            num_factors: 1,
            num_dates: 3000,
            seed: 1,
            alpha: 0.0002,
            beta_low: 0.6,
            beta_high: 1.4,
            beta_persistence: 0.995,
            beta_innovation: 0.01,
            factor_mean: 0.0003,
            factor_vol: 0.01,
            sigma: 0.012,
            vol_persistence: 0.9,
            vol_innovation: 0.15,
            leverage: 0.3,
            residual_corr: 0.0,
            covariate_persistence: 0.95,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
        }
    }
}

/// Simulated dataset together with the coefficients and shocks that produced it.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: MarketDataset,
    /// `truth[t]` produced the return on date `t+1`; the last entry is unused.
    pub truth: Vec<CoefficientSet>,
    /// Residual shocks; row `t` is `ε_t` (row 0 is zero).
    pub shocks: Vec<Vec<f64>>,
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Deterministic simulated market from `spec`.
pub fn simulate_market(spec: &FixtureSpec) -> Result<Fixture> {
    let (n, k, t_len) = (spec.num_assets, spec.num_factors, spec.num_dates);
    if n == 0 || k == 0 || t_len < 2 {
        return Err(DataError::Invalid("fixture needs assets, factors and at least two dates".into()));
    }
    if !(0.0..1.0).contains(&spec.residual_corr) {
        return Err(DataError::Invalid("residual correlation must lie in [0, 1)".into()));
    }
    if !(spec.covariate_persistence.abs() < 1.0) {
        return Err(DataError::Invalid("covariate persistence must lie in (-1, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let dates = business_days(spec.start, t_len);

    let base_beta: Vec<f64> = (0..n * k)
        .map(|idx| {
            let i = idx / k;
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let b = spec.beta_low + (spec.beta_high - spec.beta_low) * frac;
            if idx % k == 0 { b } else { 0.5 * b - 0.25 * (idx % k) as f64 }
        })
        .collect();
    let mut beta_dev = vec![0.0; n * k];
    let mut log_vol = vec![0.0; n];
    let vol_center = -0.5 * spec.vol_innovation.powi(2) / (1.0 - spec.vol_persistence.powi(2)).max(1e-12);

    let mut returns = vec![0.0; t_len * n];
    let mut factors = vec![0.0; t_len * k];
    let mut shocks = vec![vec![0.0; n]; t_len];
    let mut truth = Vec::with_capacity(t_len);
    let rho = spec.residual_corr;

    for f in factors.iter_mut().take(k) {
        *f = spec.factor_mean + spec.factor_vol * normal();
    }
    for t in 0..t_len {
        let beta: Vec<f64> = base_beta.iter().zip(&beta_dev).map(|(b, d)| b + d).collect();
        let sigma: Vec<f64> = log_vol.iter().map(|h| spec.sigma * (vol_center + h).exp()).collect();
        truth.push(CoefficientSet { alpha: vec![spec.alpha; n], beta, sigma, num_factors: k });
        if t + 1 == t_len {
            break;
        }
        let s = t + 1;
        for j in 0..k {
            factors[s * k + j] = spec.factor_mean + spec.factor_vol * normal();
        }
        let common = normal();
        let coeffs = &truth[t];
        for i in 0..n {
            let eps = rho.sqrt() * common + (1.0 - rho).sqrt() * normal();
            shocks[s][i] = eps;
            let systematic: f64 = (0..k).map(|j| coeffs.beta[i * k + j] * factors[s * k + j]).sum();
            returns[s * n + i] = coeffs.alpha[i] + systematic + coeffs.sigma[i] * eps;
        }
        for (i, h) in log_vol.iter_mut().enumerate() {
            *h = spec.vol_persistence * *h + spec.vol_innovation * (normal() - spec.leverage * shocks[s][i])
                / (1.0 + spec.leverage * spec.leverage).sqrt();
        }
        for d in beta_dev.iter_mut() {
            *d = spec.beta_persistence * *d + spec.beta_innovation * normal();
        }
    }
    // Row 0 has no predecessor; give it the model's noiseless value.
    for i in 0..n {
        let systematic: f64 = (0..k).map(|j| truth[0].beta[i * k + j] * factors[j]).sum();
        returns[i] = spec.alpha + systematic;
    }

    let covariates = simulate_covariates(&mut normal, t_len, spec.covariate_persistence);
    let asset_names = (0..n).map(|i| format!("A{i:03}")).collect();
    let factor_names = (0..k).map(|j| if j == 0 { "MKT".to_string() } else { format!("F{j}") }).collect();
    let dataset = MarketDataset::new(
        Panel::new(dates.clone(), asset_names, returns)?,
        Panel::new(dates.clone(), factor_names, factors)?,
        Panel::new(dates, COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(), covariates)?,
    )?;
    Ok(Fixture { dataset, truth, shocks })
}

// Monthly AR(1) releases held constant between releases (21 trading days).
fn simulate_covariates(normal: &mut impl FnMut() -> f64, t_len: usize, phi: f64) -> Vec<f64> {
    const LEVELS: [f64; 8] = [-3.5, -2.9, 0.5, 0.03, 0.02, 0.01, 0.01, 0.002];
    const SCALES: [f64; 8] = [0.2, 0.2, 0.1, 0.01, 0.01, 0.003, 0.01, 0.001];
    let d = LEVELS.len();
    let mut state = vec![0.0; d];
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        if t % 21 == 0 {
            for s in state.iter_mut() {
                *s = phi * *s + (1.0 - phi * phi).sqrt() * normal();
            }
        }
        for j in 0..d {
            out[t * d + j] = LEVELS[j] + SCALES[j] * state[j];
        }
    }
    out
}

/// Write the fixture as returns/factors/covariates CSVs plus a long-format truth file.
pub fn write_fixture(dir: &Path, fixture: &Fixture) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.display().to_string(), source })?;
    let ds = &fixture.dataset;
    write_panel(&dir.join("returns.csv"), &ds.returns)?;
    write_panel(&dir.join("factors.csv"), &ds.factors)?;
    write_panel(&dir.join("covariates.csv"), &ds.covariates)?;
    let rows: Vec<(NaiveDate, &CoefficientSet)> = ds.calendar().iter().copied().zip(&fixture.truth).collect();
    factor::write_coefficients(&dir.join("truth.csv"), &ds.returns.columns, &rows)
        .map_err(|e| DataError::Invalid(e.to_string()))
}
