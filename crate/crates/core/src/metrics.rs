//! Evaluation metrics for synthetic return panels.
//!
//! Panels are `T×N` row-major slices (one row per date). Path sets are a
//! slice of such panels, all with the real panel's shape.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("no observations in the tail of asset {conditioning} (pair {asset}, {conditioning})")]
    EmptyTail { asset: usize, conditioning: usize },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn rows_of(data: &[f64], n: usize, what: &str) -> Result<usize> {
    if n == 0 || data.len() % n != 0 {
        return Err(MetricsError::Shape(format!("{what}: {} values do not form rows of {n}", data.len())));
    }
    Ok(data.len() / n)
}

fn column(data: &[f64], n: usize, j: usize) -> Vec<f64> {
    data.iter().skip(j).step_by(n).copied().collect()
}

/// Root-mean-square and mean absolute error of every path against `real`.
pub fn rmse_mae(real: &[f64], paths: &[Vec<f64>]) -> Result<(f64, f64)> {
    if paths.is_empty() {
        return Err(MetricsError::Shape("no synthetic paths".into()));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    for p in paths {
        if p.len() != real.len() {
            return Err(MetricsError::Shape(format!("path of {} values vs {} real", p.len(), real.len())));
        }
        for (a, b) in p.iter().zip(real) {
            let e = a - b;
            sq += e * e;
            abs += e.abs();
        }
    }
    let count = (paths.len() * real.len()) as f64;
    Ok(((sq / count).sqrt(), abs / count))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Raw kurtosis; a Gaussian scores 3.
    pub kurtosis: f64,
}

/// Sample mean and variance (denominator `n − 1`).
pub fn mean_variance(series: &[f64]) -> Result<(f64, f64)> {
    let n = series.len();
    if n < 2 {
        return Err(MetricsError::Shape(format!("need at least two observations, got {n}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var))
}

pub fn moments(series: &[f64]) -> Result<Moments> {
    if series.len() < 4 {
        return Err(MetricsError::Shape(format!("moments need at least four observations, got {}", series.len())));
    }
    let (mean, variance) = mean_variance(series)?;
    let n = series.len() as f64;
    let m2 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return Err(MetricsError::ZeroVariance("series".into()));
    }
    let m3 = series.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = series.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Ok(Moments { mean, variance, skewness: m3 / m2.powf(1.5), kurtosis: m4 / (m2 * m2) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CurveKind {
    /// `Corr(r_{t+k}, r_t)`
    Acf,
    /// `Corr(r²_{t+k}, r²_t)`
    Vc,
    /// `Corr(r²_{t+k}, r_t)`
    Lev,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Acf => "acf",
            CurveKind::Vc => "vc",
            CurveKind::Lev => "lev",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylizedFactCurve {
    pub kind: CurveKind,
    /// `values[k-1]` is the statistic at lag `k`.
    pub values: Vec<f64>,
}

/// Pearson correlation of two equally long series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricsError::Shape(format!("correlation of {} and {} values", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricsError::ZeroVariance("correlation input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Lagged correlation between the leading and trailing segments of `lead` and `lag`.
fn lagged_corr(lead: &[f64], lag: &[f64], k: usize) -> Result<f64> {
    let t = lead.len();
    pearson(&lead[k..], &lag[..t - k])
}

pub fn stylized_curve(series: &[f64], kind: CurveKind, max_lag: usize) -> Result<StylizedFactCurve> {
    if series.len() <= max_lag + 1 {
        return Err(MetricsError::Shape(format!("series of {} too short for {max_lag} lags", series.len())));
    }
    let sq: Vec<f64> = series.iter().map(|x| x * x).collect();
    let (lead, lag) = match kind {
        CurveKind::Acf => (series, series),
        CurveKind::Vc => (sq.as_slice(), sq.as_slice()),
        CurveKind::Lev => (sq.as_slice(), series),
    };
    let values = (1..=max_lag).map(|k| lagged_corr(lead, lag, k)).collect::<Result<Vec<_>>>()?;
    Ok(StylizedFactCurve { kind, values })
}

/// Euclidean distance between the real curve and each synthetic curve, averaged.
pub fn stylized_score(real: &StylizedFactCurve, synthetic: &[StylizedFactCurve]) -> Result<f64> {
    if synthetic.is_empty() {
        return Err(MetricsError::Shape("no synthetic curves".into()));
    }
    let mut total = 0.0;
    for s in synthetic {
        if s.values.len() != real.values.len() || s.kind != real.kind {
            return Err(MetricsError::Shape("curves differ in kind or lag count".into()));
        }
        total += real.values.iter().zip(&s.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / synthetic.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DependenceKind {
    XCorr,
    XCorrE,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceMatrix {
    pub kind: DependenceKind,
    pub values: DMatrix<f64>,
}

/// Pearson correlation matrix of the columns of a `T×N` panel.
pub fn correlation_matrix(data: &[f64], n: usize) -> Result<DMatrix<f64>> {
    let t = rows_of(data, n, "correlation")?;
    if t < 2 {
        return Err(MetricsError::Shape("correlation needs two rows".into()));
    }
    let mut mean = vec![0.0; n];
    for row in data.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for row in data.chunks(n) {
        for a in 0..n {
            let da = row[a] - mean[a];
            for b in a..n {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if let Some(i) = sd.iter().position(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(MetricsError::ZeroVariance(format!("asset {i}")));
    }
    let mut out = DMatrix::<f64>::identity(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let c = (cov[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0);
            out[(a, b)] = c;
            out[(b, a)] = c;
        }
    }
    Ok(out)
}

pub fn cross_corr(data: &[f64], n: usize) -> Result<DependenceMatrix> {
    Ok(DependenceMatrix { kind: DependenceKind::XCorr, values: correlation_matrix(data, n)? })
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `P(r_i < q_i | r_j < q_j)` where `q_i` is asset i's empirical `1 − level`
/// quantile, so each tail event has marginal probability `1 − level`.
pub fn extreme_cross_corr(data: &[f64], n: usize, level: f64) -> Result<DependenceMatrix> {
    let t = rows_of(data, n, "extreme correlation")?;
    if t == 0 {
        return Err(MetricsError::Shape("empty panel".into()));
    }
    let mut tail = vec![false; t * n];
    for i in 0..n {
        let mut col = column(data, n, i);
        col.sort_by(f64::total_cmp);
        let q = quantile_sorted(&col, 1.0 - level);
        for s in 0..t {
            tail[s * n + i] = data[s * n + i] < q;
        }
    }
    let mut values = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        let cond = (0..t).filter(|&s| tail[s * n + j]).count();
        for i in 0..n {
            if i == j {
                continue;
            }
            if cond == 0 {
                return Err(MetricsError::EmptyTail { asset: i, conditioning: j });
            }
            let both = (0..t).filter(|&s| tail[s * n + j] && tail[s * n + i]).count();
            values[(i, j)] = both as f64 / cond as f64;
        }
    }
    Ok(DependenceMatrix { kind: DependenceKind::XCorrE, values })
}

pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a - b).norm())
}

/// Frobenius distance between the real matrix and the average of the path matrices.
pub fn dependence_score<F>(real: &[f64], paths: &[Vec<f64>], n: usize, matrix: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    if paths.is_empty() {
        return Err(MetricsError::Shape("no synthetic paths".into()));
    }
    let r = matrix(real)?;
    let mut avg = DMatrix::<f64>::zeros(n, n);
    for p in paths {
        avg += matrix(p)?;
    }
    avg /= paths.len() as f64;
    frobenius_distance(&r, &avg)
}

pub fn xcorr_score(real: &[f64], paths: &[Vec<f64>], n: usize) -> Result<f64> {
    dependence_score(real, paths, n, |d| correlation_matrix(d, n))
}

pub fn xcorr_e_score(real: &[f64], paths: &[Vec<f64>], n: usize, level: f64) -> Result<f64> {
    dependence_score(real, paths, n, |d| Ok(extreme_cross_corr(d, n, level)?.values))
}

fn mean_cov(data: &[f64], d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = rows_of(data, d, "moments")?;
    if t == 0 {
        return Err(MetricsError::Shape("empty sample".into()));
    }
    let mut mu = DVector::<f64>::zeros(d);
    for row in data.chunks(d) {
        for j in 0..d {
            mu[j] += row[j] / t as f64;
        }
    }
    let cov = if t >= 2 { crate::factor::sample_covariance(data, d) } else { DMatrix::zeros(d, d) };
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(MetricsError::Numeric("covariance is not positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Squared Fréchet distance between Gaussians with the given moments.
pub fn fid_squared_from_moments(
    mu_r: &DVector<f64>,
    sigma_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    sigma_g: &DMatrix<f64>,
) -> Result<f64> {
    if mu_r.len() != mu_g.len() || sigma_r.shape() != sigma_g.shape() || sigma_r.nrows() != mu_r.len() {
        return Err(MetricsError::Shape("moment dimensions differ".into()));
    }
    let root_r = psd_sqrt(sigma_r)?;
    let inner = &root_r * sigma_g * &root_r;
    let cross = psd_sqrt(&inner)?;
    let mean_term = (mu_r - mu_g).norm_squared();
    let v = mean_term + sigma_r.trace() + sigma_g.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

pub fn fid_squared(real: &[f64], synthetic: &[f64], d: usize) -> Result<f64> {
    let (mr, sr) = mean_cov(real, d)?;
    let (mg, sg) = mean_cov(synthetic, d)?;
    fid_squared_from_moments(&mr, &sr, &mg, &sg)
}

pub fn fid(real: &[f64], synthetic: &[f64], d: usize) -> Result<f64> {
    Ok(fid_squared(real, synthetic, d)?.sqrt())
}

/// One-dimensional Wasserstein-1 distance between two empirical samples.
///
/// Equal sizes compare sorted values directly; otherwise the shorter sample's
/// quantile function is interpolated onto the longer sample's grid.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Shape("empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (long, short) = if a.len() >= b.len() { (&a, &b) } else { (&b, &a) };
    let m = long.len();
    let total: f64 = if m == short.len() {
        long.iter().zip(short.iter()).map(|(x, y)| (x - y).abs()).sum()
    } else {
        long.iter()
            .enumerate()
            .map(|(k, x)| {
                let p = if m == 1 { 0.0 } else { k as f64 / (m - 1) as f64 };
                (x - quantile_sorted(short, p)).abs()
            })
            .sum()
    };
    Ok(total / m as f64)
}

/// Unit directions drawn as normalized Gaussian vectors.
pub fn projection_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

pub fn swd(real: &[f64], synthetic: &[f64], d: usize, num_projections: usize, seed: u64) -> Result<f64> {
    rows_of(real, d, "swd real")?;
    rows_of(synthetic, d, "swd synthetic")?;
    if num_projections == 0 {
        return Err(MetricsError::Shape("need at least one projection".into()));
    }
    let project = |data: &[f64], dir: &[f64]| -> Vec<f64> {
        data.chunks(d).map(|row| row.iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
    };
    let mut total = 0.0;
    for dir in projection_directions(d, num_projections, seed) {
        total += wasserstein_1d(&project(real, &dir), &project(synthetic, &dir))?;
    }
    Ok(total / num_projections as f64)
}

/// Inverse of a symmetric matrix, with a `1e-10·trace/N` ridge when needed.
fn regularized_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    let sym = (sigma + sigma.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch.inverse());
    }
    let ridge = 1e-10 * sym.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let reg = sym + DMatrix::<f64>::identity(n, n) * ridge;
    reg.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| MetricsError::Numeric("covariance is singular even after ridge".into()))
}

pub fn mahalanobis(x: &[f64], mu: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mu.len() || sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
        return Err(MetricsError::Shape("point, mean and covariance dimensions differ".into()));
    }
    let inv = regularized_inverse(sigma)?;
    Ok(mahalanobis_with_inverse(x, mu, &inv))
}

fn mahalanobis_with_inverse(x: &[f64], mu: &[f64], inv: &DMatrix<f64>) -> f64 {
    let diff = DVector::from_iterator(x.len(), x.iter().zip(mu).map(|(a, b)| a - b));
    (diff.transpose() * inv * &diff)[(0, 0)].max(0.0).sqrt()
}

/// Mean Mahalanobis distance of synthetic rows from the real sample's moments.
pub fn mean_mahalanobis(real: &[f64], synthetic: &[f64], d: usize) -> Result<f64> {
    let (mu, sigma) = mean_cov(real, d)?;
    let inv = regularized_inverse(&sigma)?;
    let mu: Vec<f64> = mu.iter().copied().collect();
    let rows = rows_of(synthetic, d, "mahalanobis")?;
    if rows == 0 {
        return Err(MetricsError::Shape("empty synthetic sample".into()));
    }
    Ok(synthetic.chunks(d).map(|r| mahalanobis_with_inverse(r, &mu, &inv)).sum::<f64>() / rows as f64)
}

/// Dynamic time warping between multivariate series with Euclidean point cost.
pub fn dtw(x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    let n = rows_of(x, d, "dtw x")?;
    let m = rows_of(y, d, "dtw y")?;
    if n == 0 || m == 0 {
        return Err(MetricsError::Shape("dtw of an empty series".into()));
    }
    let cost = |i: usize, j: usize| -> f64 {
        x[i * d..(i + 1) * d].iter().zip(&y[j * d..(j + 1) * d]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = cost(i, j) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Non-overlapping sums over consecutive blocks of `horizon` rows; a trailing
/// partial block is dropped.
pub fn aggregate_returns(data: &[f64], n: usize, horizon: usize) -> Result<Vec<f64>> {
    let t = rows_of(data, n, "aggregate")?;
    if horizon == 0 {
        return Err(MetricsError::Shape("horizon must be positive".into()));
    }
    let blocks = t / horizon;
    let mut out = vec![0.0; blocks * n];
    for b in 0..blocks {
        for s in b * horizon..(b + 1) * horizon {
            for i in 0..n {
                out[b * n + i] += data[s * n + i];
            }
        }
    }
    Ok(out)
}

/// Per-date cross-sectional mean.
pub fn equal_weight_series(data: &[f64], n: usize) -> Result<Vec<f64>> {
    rows_of(data, n, "equal weight")?;
    Ok(data.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Counts over `bins` equal-width bins spanning `[lo, hi]`; values outside are clamped.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 || hi <= lo || !lo.is_finite() || !hi.is_finite() {
        return Err(MetricsError::Shape(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// The nine distance scores reported per model; lower is better throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub swd: f64,
    pub md: f64,
    pub dtw: f64,
    pub acf: f64,
    pub vc: f64,
    pub lev: f64,
    pub xcorr: f64,
    pub xcorr_e: f64,
    pub num_paths: usize,
    pub low_sample: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub max_lag: usize,
    pub tail_level: f64,
    pub num_projections: usize,
    pub projection_seed: u64,
    /// DTW is quadratic in length; longer series are truncated to this many rows.
    pub dtw_max_len: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self { max_lag: 100, tail_level: 0.95, num_projections: 100, projection_seed: 0, dtw_max_len: 1000 }
    }
}

/// Paths below this count are flagged as too few for stable averages.
pub const LOW_SAMPLE_PATHS: usize = 10;

/// Score a synthetic path set against the real panel.
///
/// Distribution distances treat each date's return vector as one sample and
/// are computed per path, then averaged. Stylized-fact scores are averaged
/// over assets; dependence scores compare the real matrix with the average
/// of the path matrices.
pub fn evaluate(real: &[f64], paths: &[Vec<f64>], n: usize, settings: &ReportSettings) -> Result<MetricReport> {
    let t = rows_of(real, n, "real panel")?;
    if paths.is_empty() {
        return Err(MetricsError::Shape("no synthetic paths".into()));
    }
    if let Some(p) = paths.iter().find(|p| p.len() != real.len()) {
        return Err(MetricsError::Shape(format!("path of {} values vs {} real", p.len(), real.len())));
    }
    let np = paths.len() as f64;
    let mut fid_sum = 0.0;
    let mut swd_sum = 0.0;
    let mut md_sum = 0.0;
    let mut dtw_sum = 0.0;
    let dtw_rows = t.min(settings.dtw_max_len);
    for p in paths {
        fid_sum += fid(real, p, n)?;
        swd_sum += swd(real, p, n, settings.num_projections, settings.projection_seed)?;
        md_sum += mean_mahalanobis(real, p, n)?;
        dtw_sum += dtw(&real[..dtw_rows * n], &p[..dtw_rows * n], n)?;
    }
    let mut curve_scores = [0.0; 3];
    for (slot, kind) in curve_scores.iter_mut().zip([CurveKind::Acf, CurveKind::Vc, CurveKind::Lev]) {
        let mut total = 0.0;
        for i in 0..n {
            let rc = stylized_curve(&column(real, n, i), kind, settings.max_lag)?;
            let sc = paths
                .iter()
                .map(|p| stylized_curve(&column(p, n, i), kind, settings.max_lag))
                .collect::<Result<Vec<_>>>()?;
            total += stylized_score(&rc, &sc)?;
        }
        *slot = total / n as f64;
    }
    Ok(MetricReport {
        fid: fid_sum / np,
        swd: swd_sum / np,
        md: md_sum / np,
        dtw: dtw_sum / np,
        acf: curve_scores[0],
        vc: curve_scores[1],
        lev: curve_scores[2],
        xcorr: xcorr_score(real, paths, n)?,
        xcorr_e: xcorr_e_score(real, paths, n, settings.tail_level)?,
        num_paths: paths.len(),
        low_sample: paths.len() < LOW_SAMPLE_PATHS,
    })
}
