//! Adversarial training, validation-based model selection, fine-tuning and
//! rolling retraining.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataio::{MarketDataset, SplitSpec, Standardizer};
use crate::factor::{self, assemble_returns, CoefficientSet, FactorError};
use crate::metrics::{self, MetricsError};
use crate::netgen::{
    sample_interpolation_weights, wgan_gp_losses, CriticConfig, CriticModel, GeneratorConfig, GeneratorInputs,
    GeneratorModel, NetError,
};
use crate::params::{ParamSet, StoredTensor};
use crate::tcn::Dropout;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: usize, step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingConfig {
    pub epochs: usize,
    pub patience: usize,
    /// Trading days between retraining dates.
    pub step: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self { epochs: 50, patience: 20, step: 63 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Critic updates per outer iteration.
    pub n_critic: usize,
    /// Generator updates per outer iteration; zero freezes the generator.
    pub n_generator: usize,
    pub lambda: f64,
    /// Training window length; `None` means receptive field plus four years.
    pub window_len: Option<usize>,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr_scale: f64,
    /// Stop when the validation score has not improved for this many epochs.
    pub patience: Option<usize>,
    pub max_batches_per_epoch: Option<usize>,
    pub validation_paths: usize,
    pub coefficient_window: usize,
    pub seed: u64,
    pub rolling: RollingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            adam_eps: 1e-8,
            n_critic: 5,
            n_generator: 1,
            lambda: crate::netgen::DEFAULT_LAMBDA,
            window_len: None,
            fine_tune_epochs: 10,
            fine_tune_lr_scale: 0.1,
            patience: None,
            max_batches_per_epoch: None,
            validation_paths: 10,
            coefficient_window: factor::DEFAULT_WINDOW,
            seed: 0,
            rolling: RollingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.n_critic == 0 || self.n_generator > self.n_critic {
            return bad("need n_critic >= n_generator and n_critic >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moment coefficients must lie in [0, 1)");
        }
        if !(self.fine_tune_lr_scale > 0.0) {
            return bad("fine-tune learning-rate scale must be positive");
        }
        if self.lambda < 0.0 {
            return bad("gradient penalty weight must be nonnegative");
        }
        if self.validation_paths == 0 {
            return bad("need at least one validation path");
        }
        if self.window_len == Some(0) {
            return bad("window length must be positive");
        }
        Ok(())
    }

    pub fn window_for(&self, receptive_field: usize) -> usize {
        self.window_len.unwrap_or(receptive_field + 252 * 4)
    }
}

/// Adaptive-moment optimizer over a flat list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Config("optimizer state does not match the parameter list".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            if m.len() != p.len() {
                return Err(TrainError::Config("optimizer state size mismatch".into()));
            }
            let g = grads[idx].as_ref();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Generator and critic trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketGan {
    pub generator: GeneratorModel,
    pub critic: CriticModel,
}

impl MarketGan {
    pub fn new(generator: GeneratorConfig, critic: CriticConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = GeneratorModel::new(generator, &mut rng)?;
        let critic = CriticModel::new(critic, &mut rng)?;
        if generator.config.num_assets != critic.config.num_assets
            || generator.config.covariate_dim != critic.config.covariate_dim
        {
            return Err(TrainError::Config("generator and critic disagree on assets or covariates".into()));
        }
        Ok(Self { generator, critic })
    }

    pub fn fingerprint(&self) -> u64 {
        self.generator.fingerprint() ^ self.critic.fingerprint().rotate_left(7)
    }
}

fn generator_tensors_mut(g: &mut GeneratorModel) -> Vec<&mut Tensor> {
    let [a, b] = g.param_sets_mut();
    a.tensors_mut().iter_mut().chain(b.tensors_mut().iter_mut()).collect()
}

fn generator_sizes(g: &GeneratorModel) -> Vec<usize> {
    g.param_sets().iter().flat_map(|p| p.tensors().iter().map(Tensor::len)).collect()
}

/// Returns, factors, standardized covariates and hatted coefficients aligned on one calendar.
///
/// Position `s` pairs covariates `y_s` and coefficients estimated through `s`
/// with the next day's factors and returns.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub asset_names: Vec<String>,
    pub num_assets: usize,
    pub num_factors: usize,
    pub covariate_dim: usize,
    returns: Vec<f64>,
    factors: Vec<f64>,
    covariates: Vec<f64>,
    coeffs: Vec<Option<CoefficientSet>>,
    pub standardizer: Standardizer,
    /// Per-asset return scale used to normalize critic inputs.
    pub return_scale: Vec<f64>,
    pub coefficient_window: usize,
}

impl TrainingData {
    /// Fit rolling coefficients, covariate standardization and return scales on rows `[0, fit_end)`.
    pub fn prepare(dataset: &MarketDataset, coefficient_window: usize, fit_end: usize) -> Result<Self> {
        let fit_end = fit_end.min(dataset.len());
        let standardizer = Standardizer::fit(&dataset.covariates, fit_end);
        let n = dataset.num_assets();
        let mut scale = Vec::with_capacity(n);
        for i in 0..n {
            let col: Vec<f64> = (0..fit_end).map(|t| dataset.returns.get(t, i)).filter(|v| !v.is_nan()).collect();
            let (_, var) = metrics::mean_variance(&col)
                .map_err(|_| TrainError::Data(format!("asset {} has too few returns", dataset.returns.columns[i])))?;
            if var <= 0.0 {
                return Err(TrainError::Data(format!("asset {} has constant returns", dataset.returns.columns[i])));
            }
            scale.push(var.sqrt());
        }
        Self::with_preprocessing(dataset, coefficient_window, standardizer, scale)
    }

    /// Rebuild with previously fitted preprocessing (e.g. from a checkpoint).
    pub fn with_preprocessing(
        dataset: &MarketDataset,
        coefficient_window: usize,
        standardizer: Standardizer,
        return_scale: Vec<f64>,
    ) -> Result<Self> {
        if dataset.returns.has_missing() {
            return Err(TrainError::Data("returns contain missing values; impute them first".into()));
        }
        if return_scale.len() != dataset.num_assets() || standardizer.mean.len() != dataset.covariate_dim() {
            return Err(TrainError::Data("preprocessing does not match the dataset".into()));
        }
        let rolling = factor::rolling_ols(&dataset.returns, &dataset.factors, coefficient_window)?;
        Ok(Self {
            asset_names: dataset.returns.columns.clone(),
            num_assets: dataset.num_assets(),
            num_factors: dataset.num_factors(),
            covariate_dim: dataset.covariate_dim(),
            returns: dataset.returns.values.clone(),
            factors: dataset.factors.values.clone(),
            covariates: standardizer.transform(&dataset.covariates).values,
            coeffs: rolling.coefficients,
            standardizer,
            return_scale,
            coefficient_window,
        })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coefficients(&self, s: usize) -> Option<&CoefficientSet> {
        self.coeffs.get(s).and_then(Option::as_ref)
    }

    pub fn factors_at(&self, t: usize) -> &[f64] {
        &self.factors[t * self.num_factors..(t + 1) * self.num_factors]
    }

    pub fn returns_at(&self, t: usize) -> &[f64] {
        &self.returns[t * self.num_assets..(t + 1) * self.num_assets]
    }

    /// Real returns on dates `[a, b)` as a row-major panel.
    pub fn returns_range(&self, range: (usize, usize)) -> Vec<f64> {
        self.returns[range.0 * self.num_assets..range.1 * self.num_assets].to_vec()
    }

    /// Window starts whose `len` positions target return dates inside `[a, b)`.
    pub fn window_starts(&self, range: (usize, usize), len: usize) -> Vec<usize> {
        let (a, b) = range;
        if a == 0 || len == 0 || b > self.len() || a + len > b {
            return Vec::new();
        }
        let mut out = Vec::new();
        // run length of consecutive positions with coefficients ending at s
        let mut run = 0usize;
        for s in (a - 1)..(b - 1) {
            run = if self.coeffs[s].is_some() { run + 1 } else { 0 };
            if run >= len {
                out.push(s + 1 - len);
            }
        }
        out
    }

    fn check_positions(&self, from: usize, to: usize) -> Result<()> {
        match (from..to).find(|&s| self.coeffs[s].is_none()) {
            Some(s) => Err(TrainError::Data(format!("no hatted coefficients at row {s}"))),
            None => Ok(()),
        }
    }

    /// Assemble generator inputs for windows starting at `starts`, plus the
    /// matching real returns `[B, N, L]`.
    fn batch(&self, starts: &[usize], len: usize, latent: Tensor) -> (GeneratorInputs, Tensor) {
        let (n, k, d) = (self.num_assets, self.num_factors, self.covariate_dim);
        let b = starts.len();
        let mut cov = vec![0.0; b * d * len];
        let mut alpha = vec![0.0; b * n * len];
        let mut beta = vec![0.0; b * n * k * len];
        let mut sigma = vec![0.0; b * n * len];
        let mut fac = vec![0.0; b * k * len];
        let mut real = vec![0.0; b * n * len];
        for (bi, &s0) in starts.iter().enumerate() {
            for p in 0..len {
                let s = s0 + p;
                let c = self.coeffs[s].as_ref().expect("window positions have coefficients");
                for j in 0..d {
                    cov[(bi * d + j) * len + p] = self.covariates[s * d + j];
                }
                for i in 0..n {
                    alpha[(bi * n + i) * len + p] = c.alpha[i];
                    sigma[(bi * n + i) * len + p] = c.sigma[i];
                    real[(bi * n + i) * len + p] = self.returns[(s + 1) * n + i];
                    for j in 0..k {
                        beta[(bi * n * k + j * n + i) * len + p] = c.beta[i * k + j];
                    }
                }
                for j in 0..k {
                    fac[(bi * k + j) * len + p] = self.factors[(s + 1) * k + j];
                }
            }
        }
        let t = |shape: Vec<usize>, v: Vec<f64>| Tensor::new(shape, v).expect("consistent batch shape");
        let inputs = GeneratorInputs {
            latent,
            covariates: t(vec![b, d, len], cov),
            alpha_hat: t(vec![b, n, len], alpha),
            beta_hat: t(vec![b, n * k, len], beta),
            sigma_hat: t(vec![b, n, len], sigma),
            factors_next: t(vec![b, k, len], fac),
        };
        (inputs, t(vec![b, n, len], real))
    }

    fn inverse_scale(&self, batch: usize, len: usize) -> Tensor {
        let n = self.num_assets;
        let mut v = vec![0.0; batch * n * len];
        for bi in 0..batch {
            for i in 0..n {
                v[(bi * n + i) * len..(bi * n + i + 1) * len].fill(1.0 / self.return_scale[i]);
            }
        }
        Tensor::new(vec![batch, n, len], v).expect("shape")
    }
}

fn normal_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Independent RNG for (seed, purpose, counter).
pub fn stream_rng(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) ^ counter);
    rng
}

const STREAM_DATA: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_FINE_TUNE: u64 = 5;

/// Returns of `num_paths` MarketGAN paths over return dates `[a, b)`, each `(b−a)×N`.
///
/// Up to `RFS − 1` earlier positions are fed as context so that the first
/// reported dates see a full receptive field; latent draws for path `p` come
/// from their own stream, so results do not depend on chunking.
pub fn generate_paths(
    model: &GeneratorModel,
    data: &TrainingData,
    range: (usize, usize),
    num_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    generate_with_factors(model, data, range, num_paths, seed, None)
}

/// `num_samples × N` draws of the return on date `s + 1` given information
/// through `s`, with the next-day factor vector replaced by `factors_next`.
pub fn next_day_samples(
    model: &GeneratorModel,
    data: &TrainingData,
    s: usize,
    factors_next: &[f64],
    num_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if factors_next.len() != data.num_factors {
        return Err(TrainError::Data(format!("expected {} factors, got {}", data.num_factors, factors_next.len())));
    }
    let paths = generate_with_factors(model, data, (s + 1, s + 2), num_samples, seed, Some(factors_next))?;
    Ok(paths.concat())
}

fn generate_with_factors(
    model: &GeneratorModel,
    data: &TrainingData,
    range: (usize, usize),
    num_paths: usize,
    seed: u64,
    last_factors: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    let (a, b) = range;
    if a == 0 || b <= a || b > data.len() {
        return Err(TrainError::Data(format!("invalid generation range [{a}, {b})")));
    }
    data.check_positions(a - 1, b - 1)?;
    let mut c0 = a - 1;
    let rfs = model.receptive_field();
    while c0 > 0 && a - 1 - (c0 - 1) < rfs && data.coeffs[c0 - 1].is_some() {
        c0 -= 1;
    }
    let len = b - 1 - c0;
    let skip = a - 1 - c0;
    let n = data.num_assets;
    let dz = model.config.latent_dim;
    let mut out = Vec::with_capacity(num_paths);
    let k = data.num_factors;
    let per_chunk = (4096 / len).clamp(1, 512);
    let mut p0 = 0;
    while p0 < num_paths {
        let chunk = per_chunk.min(num_paths - p0);
        let mut z = Vec::with_capacity(chunk * dz * (len + 1));
        for p in p0..p0 + chunk {
            let mut rng = stream_rng(seed, STREAM_LATENT, p as u64);
            z.extend((0..dz * (len + 1)).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        let latent = Tensor::new(vec![chunk, dz, len + 1], z).expect("shape");
        let starts = vec![c0; chunk];
        let (mut inputs, _) = data.batch(&starts, len, latent);
        if let Some(f) = last_factors {
            let fd = inputs.factors_next.data_mut();
            for bi in 0..chunk {
                for (j, v) in f.iter().enumerate() {
                    fd[(bi * k + j) * len + len - 1] = *v;
                }
            }
        }
        let r = model.generate(&inputs)?;
        for bi in 0..chunk {
            let mut path = Vec::with_capacity((b - a) * n);
            for p in skip..len {
                for i in 0..n {
                    path.push(r.data()[(bi * n + i) * len + p]);
                }
            }
            out.push(path);
        }
        p0 += chunk;
    }
    Ok(out)
}

/// Factor-model bootstrap paths: hatted coefficients, realized next-day factors
/// and independent standard-normal residuals.
pub fn bootstrap_paths(data: &TrainingData, range: (usize, usize), num_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (a, b) = range;
    if a == 0 || b <= a || b > data.len() {
        return Err(TrainError::Data(format!("invalid generation range [{a}, {b})")));
    }
    data.check_positions(a - 1, b - 1)?;
    let n = data.num_assets;
    let mut out = Vec::with_capacity(num_paths);
    let mut eps = vec![0.0; n];
    for p in 0..num_paths {
        let mut rng = stream_rng(seed, STREAM_LATENT, p as u64);
        let mut path = Vec::with_capacity((b - a) * n);
        for t in a..b {
            let c = data.coeffs[t - 1].as_ref().expect("checked");
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            path.extend(assemble_returns(c, data.factors_at(t), &eps)?);
        }
        out.push(path);
    }
    Ok(out)
}

/// Frobenius gap between the real correlation matrix and that of the pooled paths.
pub fn correlation_gap(real: &[f64], paths: &[Vec<f64>], names: &[String]) -> Result<f64> {
    let n = names.len();
    let name_err = |e: MetricsError, what: &str| match e {
        MetricsError::ZeroVariance(detail) => {
            let asset = detail
                .strip_prefix("asset ")
                .and_then(|i| i.parse::<usize>().ok())
                .and_then(|i| names.get(i).cloned())
                .unwrap_or(detail);
            TrainError::Data(format!("asset {asset} has zero variance in the {what} returns"))
        }
        other => other.into(),
    };
    let rc = metrics::correlation_matrix(real, n).map_err(|e| name_err(e, "real"))?;
    let pooled: Vec<f64> = paths.iter().flatten().copied().collect();
    let gc = metrics::correlation_matrix(&pooled, n).map_err(|e| name_err(e, "generated"))?;
    Ok(metrics::frobenius_distance(&rc, &gc)?)
}

/// Correlation-matrix distance between generated and real returns on `range`.
pub fn validation_score(
    model: &GeneratorModel,
    data: &TrainingData,
    range: (usize, usize),
    num_paths: usize,
    seed: u64,
) -> Result<f64> {
    if range.1 - range.0 <= model.receptive_field() {
        return Err(TrainError::Data(format!(
            "validation slice of {} rows is not longer than the receptive field {}",
            range.1 - range.0,
            model.receptive_field()
        )));
    }
    let paths = generate_paths(model, data, range, num_paths, seed)?;
    correlation_gap(&data.returns_range(range), &paths, &data.asset_names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub wasserstein: f64,
    pub validation_score: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub critic_loss: f64,
    pub generator_loss: Option<f64>,
    pub wasserstein: f64,
}

/// Snapshot of every trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub backbone: Vec<StoredTensor>,
    pub residual_net: Vec<StoredTensor>,
    pub critic: Vec<StoredTensor>,
}

impl ModelSnapshot {
    pub fn capture(m: &MarketGan) -> Self {
        Self {
            backbone: m.generator.backbone.to_stored(),
            residual_net: m.generator.residual_net.to_stored(),
            critic: m.critic.tcn.to_stored(),
        }
    }

    pub fn restore(&self, m: &mut MarketGan) -> Result<()> {
        let e = |s: String| TrainError::Checkpoint(s);
        m.generator.backbone.load_stored(&self.backbone).map_err(|x| e(x.to_string()))?;
        m.generator.residual_net.load_stored(&self.residual_net).map_err(|x| e(x.to_string()))?;
        m.critic.tcn.load_stored(&self.critic).map_err(|x| e(x.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed so far (across fit, fine-tune and rolling phases).
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best: Option<ModelSnapshot>,
    pub generator_optimizer: Adam,
    pub critic_optimizer: Adam,
    pub log: Vec<EpochLog>,
    pub batch_log: Vec<BatchLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub stopped_early: bool,
}

/// A model with its optimizer state and training history.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MarketGan,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: MarketGan, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let gen_opt = Adam::new(&generator_sizes(&model.generator), c.learning_rate, c.beta1, c.beta2, c.adam_eps);
        let critic_sizes: Vec<usize> = model.critic.tcn.params().tensors().iter().map(Tensor::len).collect();
        let critic_opt = Adam::new(&critic_sizes, c.learning_rate, c.beta1, c.beta2, c.adam_eps);
        Ok(Self {
            config,
            model,
            state: TrainState {
                epoch: 0,
                best_score: None,
                best_epoch: None,
                best: None,
                generator_optimizer: gen_opt,
                critic_optimizer: critic_opt,
                log: Vec::new(),
                batch_log: Vec::new(),
            },
        })
    }

    pub fn window_len(&self) -> usize {
        self.config.window_for(self.model.generator.receptive_field())
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.state.generator_optimizer.learning_rate = lr;
        self.state.critic_optimizer.learning_rate = lr;
    }

    fn critic_step(
        &mut self,
        data: &TrainingData,
        starts: &[usize],
        len: usize,
        latent_rng: &mut ChaCha8Rng,
        dropout_rng: &mut ChaCha8Rng,
        epoch: usize,
        step: usize,
    ) -> Result<(f64, f64)> {
        let b = starts.len();
        let latent = normal_tensor(vec![b, self.model.generator.config.latent_dim, len + 1], latent_rng);
        let (inputs, real) = data.batch(starts, len, latent);
        let weights = sample_interpolation_weights(latent_rng, b);
        let gan = &self.model;
        let mut g = Graph::new();
        let gen_params = gan.generator.bind(&mut g, false);
        let critic_params = gan.critic.bind(&mut g, true);
        let fake = gan.generator.forward(&mut g, &gen_params, &inputs, &mut Dropout::On(dropout_rng))?;
        let inv = g.constant(data.inverse_scale(b, len));
        let fake = g.mul(fake.returns, inv).map_err(NetError::from)?;
        let fake = g.constant(g.value(fake).clone());
        let mut real = real;
        for (v, s) in real.data_mut().iter_mut().zip(data.inverse_scale(b, len).data()) {
            *v *= s;
        }
        let real = g.constant(real);
        let cov = g.constant(inputs.covariates.clone());
        let losses = wgan_gp_losses(
            &mut g,
            &gan.critic,
            &critic_params,
            real,
            fake,
            cov,
            self.config.lambda,
            &weights,
            &mut Dropout::On(dropout_rng),
        )?;
        let loss = g.value(losses.critic_loss).item().map_err(NetError::from)?;
        let wass = g.value(losses.wasserstein).item().map_err(NetError::from)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "critic loss", epoch, step });
        }
        let grads = g.backward(losses.critic_loss, None).map_err(NetError::from)?;
        let grads: Vec<Option<Tensor>> = critic_params.iter().map(|v| grads.get(*v).cloned()).collect();
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite { what: "critic gradient", epoch, step });
        }
        let mut params: Vec<&mut Tensor> = self.model.critic.tcn.params_mut().tensors_mut().iter_mut().collect();
        self.state.critic_optimizer.step(&mut params, &grads)?;
        Ok((loss, wass))
    }

    fn generator_step(
        &mut self,
        data: &TrainingData,
        starts: &[usize],
        len: usize,
        latent_rng: &mut ChaCha8Rng,
        dropout_rng: &mut ChaCha8Rng,
        epoch: usize,
        step: usize,
    ) -> Result<f64> {
        let b = starts.len();
        let latent = normal_tensor(vec![b, self.model.generator.config.latent_dim, len + 1], latent_rng);
        let (inputs, _) = data.batch(starts, len, latent);
        let gan = &self.model;
        let mut g = Graph::new();
        let gen_params = gan.generator.bind(&mut g, true);
        let critic_params = gan.critic.bind(&mut g, false);
        let fake = gan.generator.forward(&mut g, &gen_params, &inputs, &mut Dropout::On(dropout_rng))?;
        let inv = g.constant(data.inverse_scale(b, len));
        let fake = g.mul(fake.returns, inv).map_err(NetError::from)?;
        let cov = g.constant(inputs.covariates.clone());
        let score = gan.critic.score(&mut g, &critic_params, fake, cov, &mut Dropout::On(dropout_rng))?;
        let mean = g.mean(score);
        let loss_var = g.scale(mean, -1.0);
        let loss = g.value(loss_var).item().map_err(NetError::from)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "generator loss", epoch, step });
        }
        let grads = g.backward(loss_var, None).map_err(NetError::from)?;
        let grads: Vec<Option<Tensor>> = gen_params.all().map(|v: Var| grads.get(v).cloned()).collect();
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite { what: "generator gradient", epoch, step });
        }
        let mut params = generator_tensors_mut(&mut self.model.generator);
        self.state.generator_optimizer.step(&mut params, &grads)?;
        Ok(loss)
    }

    /// One pass over shuffled window starts in `range` (return dates).
    ///
    /// Each outer iteration performs `n_critic` critic updates, each on its own
    /// slice of the permutation, followed by `n_generator` generator updates on
    /// freshly sampled windows.
    pub fn train_epoch(&mut self, data: &TrainingData, range: (usize, usize)) -> Result<EpochLog> {
        self.run_epoch(data, range, STREAM_DATA)
    }

    fn run_epoch(&mut self, data: &TrainingData, range: (usize, usize), purpose: u64) -> Result<EpochLog> {
        let len = self.window_len();
        let mut starts = data.window_starts(range, len);
        if starts.is_empty() {
            return Err(TrainError::Data(format!(
                "no training windows of length {len} in rows [{}, {})",
                range.0, range.1
            )));
        }
        let epoch = self.state.epoch;
        let seed = self.config.seed;
        let counter = (purpose << 24) ^ epoch as u64;
        let mut data_rng = stream_rng(seed, STREAM_DATA, counter);
        let mut latent_rng = stream_rng(seed, STREAM_LATENT, counter);
        let mut dropout_rng = stream_rng(seed, STREAM_DROPOUT, counter);
        starts.shuffle(&mut data_rng);
        let bsz = self.config.batch_size.min(starts.len());
        let per_iter = bsz * self.config.n_critic;
        let mut iters = (starts.len() / per_iter).max(1);
        if let Some(cap) = self.config.max_batches_per_epoch {
            iters = iters.min(cap.max(1));
        }
        let (mut c_sum, mut g_sum, mut w_sum) = (0.0, 0.0, 0.0);
        let mut g_count = 0usize;
        for it in 0..iters {
            let mut c_last = 0.0;
            let mut w_last = 0.0;
            for d in 0..self.config.n_critic {
                let from = ((it * self.config.n_critic + d) * bsz) % starts.len();
                let batch: Vec<usize> = (0..bsz).map(|j| starts[(from + j) % starts.len()]).collect();
                let (c, w) = self.critic_step(data, &batch, len, &mut latent_rng, &mut dropout_rng, epoch, it)?;
                c_last = c;
                w_last = w;
            }
            let mut g_last = None;
            for _ in 0..self.config.n_generator {
                let batch: Vec<usize> = (0..bsz).map(|_| starts[data_rng.random_range(0..starts.len())]).collect();
                let gl = self.generator_step(data, &batch, len, &mut latent_rng, &mut dropout_rng, epoch, it)?;
                g_last = Some(gl);
                g_sum += gl;
                g_count += 1;
            }
            c_sum += c_last;
            w_sum += w_last;
            self.state.batch_log.push(BatchLog {
                epoch,
                batch: it,
                critic_loss: c_last,
                generator_loss: g_last,
                wasserstein: w_last,
            });
        }
        self.state.epoch += 1;
        let entry = EpochLog {
            epoch,
            critic_loss: c_sum / iters as f64,
            generator_loss: if g_count > 0 { g_sum / g_count as f64 } else { f64::NAN },
            wasserstein: w_sum / iters as f64,
            validation_score: None,
            learning_rate: self.state.critic_optimizer.learning_rate,
        };
        self.state.log.push(entry.clone());
        Ok(entry)
    }

    /// Validation score of the current generator with the trainer's validation seed.
    pub fn score(&self, data: &TrainingData, range: (usize, usize)) -> Result<f64> {
        validation_score(&self.model.generator, data, range, self.config.validation_paths, self.config.seed ^ STREAM_VALIDATION)
    }

    /// Record a validation score for the last epoch and keep the best snapshot.
    fn record(&mut self, score: f64) -> bool {
        if let Some(last) = self.state.log.last_mut() {
            last.validation_score = Some(score);
        }
        let improved = self.state.best_score.is_none_or(|b| score < b);
        if improved {
            self.state.best_score = Some(score);
            self.state.best_epoch = Some(self.state.epoch.saturating_sub(1));
            self.state.best = Some(ModelSnapshot::capture(&self.model));
        }
        improved
    }

    fn reset_selection(&mut self) {
        self.state.best_score = None;
        self.state.best_epoch = None;
        self.state.best = None;
    }

    /// Train for up to `epochs` epochs with validation-based selection, then
    /// restore the best snapshot.
    fn select(
        &mut self,
        data: &TrainingData,
        split: &SplitSpec,
        epochs: usize,
        patience: Option<usize>,
    ) -> Result<FitSummary> {
        let lr = self.config.learning_rate;
        self.set_learning_rate(lr);
        let mut since = 0;
        let mut run = 0;
        let mut stopped = false;
        for _ in 0..epochs {
            self.train_epoch(data, split.train)?;
            run += 1;
            let s = self.score(data, split.validation)?;
            let log = self.state.log.last().expect("epoch logged");
            info!(
                "epoch {} critic {:.5} generator {:.5} wasserstein {:.5} validation {:.5}",
                log.epoch, log.critic_loss, log.generator_loss, log.wasserstein, s
            );
            if self.record(s) {
                since = 0;
            } else {
                since += 1;
                if patience.is_some_and(|p| since >= p) {
                    stopped = true;
                    break;
                }
            }
        }
        if let Some(best) = self.state.best.clone() {
            best.restore(&mut self.model)?;
        }
        Ok(FitSummary { epochs_run: run, best_epoch: self.state.best_epoch, best_score: self.state.best_score, stopped_early: stopped })
    }

    /// Full training: model selection on the validation slice, then fine-tuning on it.
    pub fn fit(&mut self, data: &TrainingData, split: &SplitSpec) -> Result<FitSummary> {
        self.reset_selection();
        let summary = self.select(data, split, self.config.epochs, self.config.patience)?;
        self.fine_tune(data, split.validation, self.config.fine_tune_epochs)?;
        Ok(summary)
    }

    /// Continue training on `range` only, at the scaled learning rate. Returns that rate.
    pub fn fine_tune(&mut self, data: &TrainingData, range: (usize, usize), epochs: usize) -> Result<f64> {
        let lr = self.config.learning_rate * self.config.fine_tune_lr_scale;
        if epochs == 0 {
            return Ok(lr);
        }
        self.set_learning_rate(lr);
        for _ in 0..epochs {
            self.run_epoch(data, range, STREAM_FINE_TUNE)?;
        }
        self.set_learning_rate(self.config.learning_rate);
        Ok(lr)
    }

    pub fn checkpoint(&self, data: &TrainingData) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            generator_config: self.model.generator.config.clone(),
            critic_config: self.model.critic.config.clone(),
            train_config: self.config.clone(),
            model: ModelSnapshot::capture(&self.model),
            state: self.state.clone(),
            standardizer: data.standardizer.clone(),
            return_scale: data.return_scale.clone(),
            coefficient_window: data.coefficient_window,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = MarketGan::new(ck.generator_config.clone(), ck.critic_config.clone(), 0)?;
        ck.model.restore(&mut model)?;
        let mut t = Trainer::new(model, ck.train_config.clone())?;
        t.state = ck.state.clone();
        Ok(t)
    }
}

/// Retraining dates: every `step` rows from `first_end` up to `last_end` (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingSchedule {
    pub ends: Vec<usize>,
    /// Rows of history used at each retraining date (split 7:1).
    pub train_len: usize,
}

impl RollingSchedule {
    pub fn quarterly(first_end: usize, last_end: usize, step: usize, train_len: usize) -> Self {
        let step = step.max(1);
        let ends = (0..).map(|q| first_end + q * step).take_while(|&e| e <= last_end).collect();
        Self { ends, train_len }
    }
}

#[derive(Debug, Clone)]
pub struct QuarterResult {
    pub end: usize,
    /// Validation score of the warm-started model before any training this quarter.
    pub initial_score: f64,
    pub summary: FitSummary,
    pub checkpoint: Checkpoint,
}

/// Warm-started retraining at every scheduled date, each followed by fine-tuning.
pub fn rolling_retrain(trainer: &mut Trainer, data: &TrainingData, schedule: &RollingSchedule) -> Result<Vec<QuarterResult>> {
    let mut out = Vec::new();
    let len = trainer.window_len();
    let rfs = trainer.model.generator.receptive_field();
    for &end in &schedule.ends {
        let start = end.saturating_sub(schedule.train_len).max(1);
        if end > data.len() || end <= start {
            warn!("retraining date {end} lies outside the data; skipped");
            continue;
        }
        let split = SplitSpec::seven_to_one(start, end);
        let v = split.validation;
        let enough = !data.window_starts(split.train, len).is_empty()
            && v.1 - v.0 > rfs
            && data.check_positions(v.0 - 1, v.1 - 1).is_ok();
        if !enough {
            warn!("retraining date {end}: insufficient data for training and validation; skipped");
            continue;
        }
        let initial = trainer.score(data, v)?;
        trainer.reset_selection();
        let rc = trainer.config.rolling.clone();
        let summary = trainer.select(data, &split, rc.epochs, Some(rc.patience))?;
        trainer.fine_tune(data, v, trainer.config.fine_tune_epochs)?;
        out.push(QuarterResult { end, initial_score: initial, summary, checkpoint: trainer.checkpoint(data) });
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "marketgan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub generator_config: GeneratorConfig,
    pub critic_config: CriticConfig,
    pub train_config: TrainConfig,
    pub model: ModelSnapshot,
    pub state: TrainState,
    pub standardizer: Standardizer,
    pub return_scale: Vec<f64>,
    pub coefficient_window: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), detail: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        Self::from_json(&s)
    }

    /// Generator with the checkpointed weights.
    pub fn generator(&self) -> Result<GeneratorModel> {
        Ok(Trainer::from_checkpoint(self)?.model.generator)
    }

    /// Training data rebuilt with the checkpoint's preprocessing.
    pub fn training_data(&self, dataset: &MarketDataset) -> Result<TrainingData> {
        TrainingData::with_preprocessing(dataset, self.coefficient_window, self.standardizer.clone(), self.return_scale.clone())
    }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io { path: path.display().to_string(), detail: e.to_string() }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "critic_loss", "generator_loss", "wasserstein", "validation_score", "learning_rate"])
        .map_err(|e| csv_err(path, e))?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.critic_loss),
            format!("{:?}", r.generator_loss),
            format!("{:?}", r.wasserstein),
            opt(r.validation_score),
            format!("{:?}", r.learning_rate),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn write_batch_log(path: &Path, log: &[BatchLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "batch", "critic_loss", "generator_loss", "wasserstein"]).map_err(|e| csv_err(path, e))?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.batch.to_string(),
            format!("{:?}", r.critic_loss),
            opt(r.generator_loss),
            format!("{:?}", r.wasserstein),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// Parameter count of a model, for logging.
pub fn parameter_count(m: &MarketGan) -> usize {
    let sets: [&ParamSet; 3] = [m.generator.backbone.params(), m.generator.residual_net.params(), m.critic.tcn.params()];
    sets.iter().map(|p| p.num_values()).sum()
}
