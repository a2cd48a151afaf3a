//! Factor-structured generator and conditional critic.
//!
//! The generator produces time-varying coefficients by scaling ex-post
//! regression estimates, `α_t = α̂_t ⊙ (1 + f_α)`, and likewise for `β_t`
//! and `σ_t`, where `f_α, f_β, f_σ` are heads on a shared TCN backbone fed
//! with latent noise and covariates over the receptive field. Residual
//! shocks come from a second TCN with receptive field one, fed with
//! `(z_{t+1}, y_t)`. Returns are assembled as
//! `r_{t+1} = α_t + β_t·F_{t+1} + σ_t ⊙ ε_{t+1}`.
//!
//! Each latent draw `z_{t+1}` is used twice: for the residual at `t+1` and
//! as the newest element of the coefficient window at `t+1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::factor::CoefficientSet;
use crate::params::ParamSet;
use crate::tcn::{Dropout, TcnConfig, TcnError, TcnNetwork};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tcn(#[from] TcnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NetError>;

pub const DEFAULT_LATENT_DIM: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_assets: usize,
    pub num_factors: usize,
    pub latent_dim: usize,
    pub covariate_dim: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub num_blocks: usize,
    pub residual_hidden: usize,
    pub residual_blocks: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub output_init_std: f64,
}

impl GeneratorConfig {
    /// Full-size architecture: 80 channels, k=2, D=2, L=6 backbone and a
    /// six-block 1×1 residual network.
    pub fn full(num_assets: usize, num_factors: usize, covariate_dim: usize) -> Self {
        Self {
            num_assets,
            num_factors,
            latent_dim: DEFAULT_LATENT_DIM,
            covariate_dim,
            hidden: 80,
            kernel_size: 2,
            dilation_base: 2,
            num_blocks: 6,
            residual_hidden: 80,
            residual_blocks: 6,
            dropout: 0.2,
            init_std: 0.5,
            output_init_std: 0.5,
        }
    }

    pub fn head_channels(&self) -> usize {
        self.num_assets * (2 + self.num_factors)
    }

    fn backbone(&self) -> TcnConfig {
        let mut c = TcnConfig::uniform(
            self.latent_dim + self.covariate_dim,
            self.hidden,
            self.head_channels(),
            self.kernel_size,
            self.dilation_base,
            self.num_blocks,
        );
        c.dropout = self.dropout;
        c.init_std = self.init_std;
        c.output_init_std = self.output_init_std;
        c
    }

    fn residual(&self) -> TcnConfig {
        let mut c = TcnConfig::uniform(
            self.latent_dim + self.covariate_dim,
            self.residual_hidden,
            self.num_assets,
            1,
            1,
            self.residual_blocks,
        );
        c.dropout = self.dropout;
        c.init_std = self.init_std;
        c.output_init_std = self.output_init_std;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub num_assets: usize,
    pub covariate_dim: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub output_init_std: f64,
}

impl CriticConfig {
    /// Same layout as the generator backbone with 160 channels.
    pub fn full(num_assets: usize, covariate_dim: usize) -> Self {
        Self {
            num_assets,
            covariate_dim,
            hidden: 160,
            kernel_size: 2,
            dilation_base: 2,
            num_blocks: 6,
            dropout: 0.2,
            init_std: 0.5,
            output_init_std: 0.5,
        }
    }

    fn tcn(&self) -> TcnConfig {
        let mut c = TcnConfig::uniform(
            self.num_assets + self.covariate_dim,
            self.hidden,
            1,
            self.kernel_size,
            self.dilation_base,
            self.num_blocks,
        );
        c.dropout = self.dropout;
        c.init_std = self.init_std;
        c.output_init_std = self.output_init_std;
        c
    }
}

/// Shared coefficient backbone with a stacked `α|β|σ` output layer, plus the residual network.
///
/// The three heads are disjoint channel ranges of one 1×1 output convolution:
/// channels `[0, N)` feed `f_α`, `[N, N+NK)` feed `f_β` (channel `N + k·N + i`
/// is loading `(i, k)`), and `[N+NK, 2N+NK)` feed `f_σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub backbone: TcnNetwork,
    pub residual_net: TcnNetwork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    pub config: CriticConfig,
    pub tcn: TcnNetwork,
}

/// Graph leaves for one generator's parameters.
pub struct BoundGenerator {
    pub backbone: Vec<Var>,
    pub residual: Vec<Var>,
}

impl BoundGenerator {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.backbone.iter().chain(&self.residual).copied()
    }
}

/// Constant inputs for a batch of `B` windows of length `L`.
///
/// Position `s` of the window corresponds to date `t_b + s`: coefficients
/// are formed at `t_b + s` and the return produced there is `r_{t_b+s+1}`.
#[derive(Debug, Clone)]
pub struct GeneratorInputs {
    /// `[B, d_z, L+1]`; slot `s` holds `z_{t_b+s}`.
    pub latent: Tensor,
    /// `[B, d_y, L]`.
    pub covariates: Tensor,
    /// `[B, N, L]`.
    pub alpha_hat: Tensor,
    /// `[B, N·K, L]`, channel `k·N + i`.
    pub beta_hat: Tensor,
    /// `[B, N, L]`.
    pub sigma_hat: Tensor,
    /// `[B, K, L]`; slot `s` holds `F_{t_b+s+1}`.
    pub factors_next: Tensor,
}

impl GeneratorInputs {
    pub fn batch(&self) -> usize {
        self.covariates.shape()[0]
    }

    pub fn window(&self) -> usize {
        self.covariates.shape()[2]
    }
}

/// Graph nodes produced by one generator pass, all shaped `[B, ·, L]`.
pub struct GeneratedVars {
    pub alpha: Var,
    pub beta: Var,
    pub sigma: Var,
    pub eps: Var,
    pub returns: Var,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.num_assets == 0 || config.num_factors == 0 || config.latent_dim == 0 {
            return Err(NetError::Config("assets, factors and latent dimension must be positive".into()));
        }
        let backbone = TcnNetwork::new(config.backbone(), rng)?;
        let residual_net = TcnNetwork::new(config.residual(), rng)?;
        debug_assert_eq!(residual_net.receptive_field(), 1);
        Ok(Self { config, backbone, residual_net })
    }

    pub fn receptive_field(&self) -> usize {
        self.backbone.receptive_field()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            backbone: self.backbone.params().bind(g, trainable),
            residual: self.residual_net.params().bind(g, trainable),
        }
    }

    /// Flattened parameter list (backbone then residual network).
    pub fn param_sets(&self) -> [&ParamSet; 2] {
        [self.backbone.params(), self.residual_net.params()]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 2] {
        [self.backbone.params_mut(), self.residual_net.params_mut()]
    }

    pub fn fingerprint(&self) -> u64 {
        self.backbone.params().fingerprint() ^ self.residual_net.params().fingerprint().rotate_left(1)
    }

    fn check_inputs(&self, x: &GeneratorInputs) -> Result<()> {
        let c = &self.config;
        let (b, l) = (x.batch(), x.window());
        let want: [(&str, &Tensor, [usize; 3]); 6] = [
            ("latent", &x.latent, [b, c.latent_dim, l + 1]),
            ("covariates", &x.covariates, [b, c.covariate_dim, l]),
            ("alpha_hat", &x.alpha_hat, [b, c.num_assets, l]),
            ("beta_hat", &x.beta_hat, [b, c.num_assets * c.num_factors, l]),
            ("sigma_hat", &x.sigma_hat, [b, c.num_assets, l]),
            ("factors_next", &x.factors_next, [b, c.num_factors, l]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape {
                return Err(NetError::Input(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        for (name, t) in [("alpha_hat", &x.alpha_hat), ("beta_hat", &x.beta_hat), ("sigma_hat", &x.sigma_hat)] {
            if !t.is_finite() {
                return Err(NetError::Input(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// Full generator pass on graph `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundGenerator,
        inputs: &GeneratorInputs,
        dropout: &mut Dropout<'_>,
    ) -> Result<GeneratedVars> {
        self.check_inputs(inputs)?;
        let c = &self.config;
        let (n, k, l) = (c.num_assets, c.num_factors, inputs.window());
        let latent = g.constant(inputs.latent.clone());
        let y = g.constant(inputs.covariates.clone());
        let z_coef = g.slice(latent, 2, 0, l)?;
        let z_next = g.slice(latent, 2, 1, l)?;

        let coef_in = g.concat(&[z_coef, y], 1)?;
        let heads = self.backbone.forward(g, &bound.backbone, coef_in, dropout)?;
        let f_alpha = g.slice(heads, 1, 0, n)?;
        let f_beta = g.slice(heads, 1, n, n * k)?;
        let f_sigma = g.slice(heads, 1, n + n * k, n)?;

        let alpha = scale_hat(g, &inputs.alpha_hat, f_alpha)?;
        let beta = scale_hat(g, &inputs.beta_hat, f_beta)?;
        let sigma = scale_hat(g, &inputs.sigma_hat, f_sigma)?;

        let resid_in = g.concat(&[z_next, y], 1)?;
        let eps = self.residual_net.forward(g, &bound.residual, resid_in, dropout)?;

        let factors = g.constant(inputs.factors_next.clone());
        let mut returns = alpha;
        let shape = g.shape(alpha).to_vec();
        for j in 0..k {
            let beta_j = g.slice(beta, 1, j * n, n)?;
            let f_j = g.slice(factors, 1, j, 1)?;
            let f_j = g.broadcast_to(f_j, &shape)?;
            let term = g.mul(beta_j, f_j)?;
            returns = g.add(returns, term)?;
        }
        let noise = g.mul(sigma, eps)?;
        let returns = g.add(returns, noise)?;
        Ok(GeneratedVars { alpha, beta, sigma, eps, returns })
    }

    /// Inference pass returning generated returns `[B, N, L]`.
    pub fn generate(&self, inputs: &GeneratorInputs) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, inputs, &mut Dropout::Off)?;
        Ok(g.value(out.returns).clone())
    }

    /// Coefficients at the last date of a trailing window.
    ///
    /// `z_window` is `W×d_z` and `y_window` is `W×d_y` (oldest first); windows
    /// shorter than the receptive field are zero-padded on the left.
    pub fn generate_coefficients(&self, z_window: &[f64], y_window: &[f64], hat: &CoefficientSet) -> Result<CoefficientSet> {
        let c = &self.config;
        if !hat.is_finite() {
            return Err(NetError::Input("hat coefficients contain non-finite values".into()));
        }
        if hat.num_assets() != c.num_assets || hat.num_factors != c.num_factors {
            return Err(NetError::Input("hat coefficients do not match the model dimensions".into()));
        }
        let w = window_len(z_window, c.latent_dim)?;
        if window_len(y_window, c.covariate_dim)? != w || w == 0 {
            return Err(NetError::Input("latent and covariate windows must have equal nonzero length".into()));
        }
        let x = channel_major(&[(z_window, c.latent_dim), (y_window, c.covariate_dim)], w);
        let heads = self.backbone.run(&x)?.values;
        let last = |ch: usize| heads.data()[ch * w + w - 1];
        let (n, k) = (c.num_assets, c.num_factors);
        let alpha = (0..n).map(|i| hat.alpha[i] * (1.0 + last(i))).collect();
        let mut beta = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                beta[i * k + j] = hat.beta[i * k + j] * (1.0 + last(n + j * n + i));
            }
        }
        let sigma = (0..n).map(|i| hat.sigma[i] * (1.0 + last(n + n * k + i))).collect();
        Ok(CoefficientSet { alpha, beta, sigma, num_factors: k })
    }

    /// Residual shock `ε_{t+1}` from `(z_{t+1}, y_t)`.
    pub fn generate_residuals(&self, z_next: &[f64], y_t: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        if z_next.len() != c.latent_dim || y_t.len() != c.covariate_dim {
            return Err(NetError::Input(format!(
                "expected {} latent and {} covariate values",
                c.latent_dim, c.covariate_dim
            )));
        }
        let x = channel_major(&[(z_next, c.latent_dim), (y_t, c.covariate_dim)], 1);
        Ok(self.residual_net.run(&x)?.values.into_data())
    }
}

fn scale_hat(g: &mut Graph, hat: &Tensor, f: Var) -> Result<Var> {
    let hat = g.constant(hat.clone());
    let one_plus = g.offset(f, 1.0);
    Ok(g.mul(hat, one_plus)?)
}

fn window_len(values: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || values.len() % dim != 0 {
        return Err(NetError::Input(format!("window of {} values is not a multiple of {dim}", values.len())));
    }
    Ok(values.len() / dim)
}

/// Stack time-major blocks (`T×d` each) into a `[1, Σd, T]` tensor.
fn channel_major(blocks: &[(&[f64], usize)], t: usize) -> Tensor {
    let channels: usize = blocks.iter().map(|b| b.1).sum();
    let mut data = vec![0.0; channels * t];
    let mut base = 0;
    for &(values, d) in blocks {
        for s in 0..t {
            for j in 0..d {
                data[(base + j) * t + s] = values[s * d + j];
            }
        }
        base += d;
    }
    Tensor::new(vec![1, channels, t], data).expect("consistent shape")
}

impl CriticModel {
    pub fn new(config: CriticConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let tcn = TcnNetwork::new(config.tcn(), rng)?;
        Ok(Self { config, tcn })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tcn.params().bind(g, trainable)
    }

    pub fn fingerprint(&self) -> u64 {
        self.tcn.params().fingerprint()
    }

    /// Per-window scores `[B, 1, 1]`: the TCN's single output channel averaged over time.
    pub fn score(&self, g: &mut Graph, bound: &[Var], returns: Var, covariates: Var, dropout: &mut Dropout<'_>) -> Result<Var> {
        let x = g.concat(&[returns, covariates], 1)?;
        let out = self.tcn.forward(g, bound, x, dropout)?;
        let t = g.shape(out)[2];
        let s = g.sum_axis(out, 2)?;
        Ok(g.scale(s, 1.0 / t as f64))
    }

    /// Score of a single window; `returns_window` is `T×N`, `y_window` is `T×d_y`.
    pub fn critic_score(&self, returns_window: &[f64], y_window: &[f64]) -> Result<f64> {
        let c = &self.config;
        let t = window_len(returns_window, c.num_assets)?;
        if window_len(y_window, c.covariate_dim)? != t {
            return Err(NetError::Input("return and covariate windows differ in length".into()));
        }
        let r = channel_major(&[(returns_window, c.num_assets)], t);
        let y = channel_major(&[(y_window, c.covariate_dim)], t);
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let (rv, yv) = (g.constant(r), g.constant(y));
        let s = self.score(&mut g, &bound, rv, yv, &mut Dropout::Off)?;
        Ok(g.value(s).item()?)
    }
}

/// Interpolation weights and points used by the gradient penalty.
#[derive(Debug, Clone)]
pub struct Interpolant {
    pub weights: Vec<f64>,
    pub points: Tensor,
}

/// Graph nodes of the conditional WGAN-GP objective.
pub struct WganLosses {
    /// `mean D(fake) − mean D(real) + λ·mean (‖∇D(x̃)‖ − 1)²`.
    pub critic_loss: Var,
    /// `−mean D(fake)`.
    pub generator_loss: Var,
    /// `mean D(real) − mean D(fake)`.
    pub wasserstein: Var,
    pub penalty: Var,
    pub interpolant: Interpolant,
}

/// `x̃ = u·real + (1−u)·fake`, one weight per batch element.
pub fn interpolate(real: &Tensor, fake: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.shape().first() != Some(&weights.len()) {
        return Err(NetError::Input("real, fake and interpolation weights disagree in batch shape".into()));
    }
    let per = real.len() / weights.len().max(1);
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(idx, (r, f))| {
            let u = weights[idx / per];
            u * r + (1.0 - u) * f
        })
        .collect();
    Ok(Tensor::new(real.shape().to_vec(), data)?)
}

/// Build the critic and generator objectives on `g`.
///
/// `real` and `fake` are `[B, N, L]` nodes (fake may carry generator
/// gradients); the interpolant is a fresh leaf built from their values and
/// is scored with dropout disabled.
#[allow(clippy::too_many_arguments)]
pub fn wgan_gp_losses(
    g: &mut Graph,
    critic: &CriticModel,
    critic_params: &[Var],
    real: Var,
    fake: Var,
    covariates: Var,
    lambda: f64,
    weights: &[f64],
    dropout: &mut Dropout<'_>,
) -> Result<WganLosses> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(NetError::Config(format!("gradient penalty coefficient {lambda} must be nonnegative")));
    }
    let d_real = critic.score(g, critic_params, real, covariates, dropout)?;
    let d_fake = critic.score(g, critic_params, fake, covariates, dropout)?;
    let mean_real = g.mean(d_real);
    let mean_fake = g.mean(d_fake);

    let points = interpolate(g.value(real), g.value(fake), weights)?;
    let x_tilde = g.leaf(points.clone());
    let d_tilde = critic.score(g, critic_params, x_tilde, covariates, &mut Dropout::Off)?;
    let total = g.sum(d_tilde);
    let grad = g.grad(total, None, &[x_tilde])?[0];
    let sq = g.square(grad);
    let per_time = g.sum_axis(sq, 2)?;
    let per_sample = g.sum_axis(per_time, 1)?;
    let norm = g.sqrt(per_sample)?;
    let gap = g.offset(norm, -1.0);
    let gap2 = g.square(gap);
    let mean_gap = g.mean(gap2);
    let penalty = g.scale(mean_gap, lambda);

    let wasserstein = g.sub(mean_real, mean_fake)?;
    let neg_w = g.scale(wasserstein, -1.0);
    let critic_loss = g.add(neg_w, penalty)?;
    let generator_loss = g.scale(mean_fake, -1.0);
    Ok(WganLosses { critic_loss, generator_loss, wasserstein, penalty, interpolant: Interpolant { weights: weights.to_vec(), points } })
}

/// Seeded latent draws for a path: `len × d_z` standard normals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub seed: u64,
    pub dim: usize,
    pub z: Vec<f64>,
}

impl LatentSequence {
    pub fn sample(seed: u64, len: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..len * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { seed, dim, z }
    }

    pub fn len(&self) -> usize {
        self.z.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.z[t * self.dim..(t + 1) * self.dim]
    }
}

/// Uniform interpolation weights, one per batch element.
pub fn sample_interpolation_weights(rng: &mut ChaCha8Rng, batch: usize) -> Vec<f64> {
    (0..batch).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gen(seed: u64) -> GeneratorModel {
        let cfg = GeneratorConfig {
            hidden: 4,
            residual_hidden: 4,
            num_blocks: 2,
            residual_blocks: 2,
            latent_dim: 3,
            covariate_dim: 2,
            ..GeneratorConfig::full(2, 1, 2)
        };
        GeneratorModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zero_heads(m: &mut GeneratorModel) {
        let ps = m.backbone.params_mut();
        let names: Vec<String> = ps.names().to_vec();
        for (i, n) in names.iter().enumerate() {
            if n.starts_with("output.") {
                ps.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn hat() -> CoefficientSet {
        CoefficientSet { alpha: vec![0.001, -0.002], beta: vec![1.1, 0.8], sigma: vec![0.01, 0.02], num_factors: 1 }
    }

    #[test]
    fn zero_heads_return_hat_coefficients() {
        let mut m = tiny_gen(1);
        zero_heads(&mut m);
        let z = LatentSequence::sample(4, 7, 3);
        let y = vec![0.3; 14];
        let c = m.generate_coefficients(&z.z, &y, &hat()).unwrap();
        assert_eq!(c, hat());
    }

    #[test]
    fn minus_one_alpha_head_annihilates_alpha() {
        let mut m = tiny_gen(2);
        zero_heads(&mut m);
        let ps = m.backbone.params_mut();
        let bias = ps.names().iter().position(|n| n == "output.bias").unwrap();
        ps.get_mut(bias).data_mut()[..2].copy_from_slice(&[-1.0, -1.0]);
        let z = LatentSequence::sample(5, 7, 3);
        let c = m.generate_coefficients(&z.z, &[0.0; 14], &hat()).unwrap();
        assert_eq!(c.alpha, vec![0.0, 0.0]);
        assert_eq!(c.beta, hat().beta);
    }

    #[test]
    fn coefficient_generation_is_deterministic_and_validates() {
        let m = tiny_gen(3);
        let z = LatentSequence::sample(6, 7, 3);
        let a = m.generate_coefficients(&z.z, &[0.1; 14], &hat()).unwrap();
        let b = m.generate_coefficients(&z.z, &[0.1; 14], &hat()).unwrap();
        assert_eq!(a, b);
        let mut bad = hat();
        bad.alpha[0] = f64::NAN;
        assert!(matches!(m.generate_coefficients(&z.z, &[0.1; 14], &bad), Err(NetError::Input(_))));
        // shorter than the receptive field is allowed
        assert!(m.generate_coefficients(&z.z[..6], &[0.1; 4], &hat()).is_ok());
    }

    #[test]
    fn residuals_zero_weights_give_bias() {
        let mut m = tiny_gen(4);
        let ps = m.residual_net.params_mut();
        for t in ps.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = ps.names().iter().position(|n| n == "output.bias").unwrap();
        ps.get_mut(bias).data_mut().copy_from_slice(&[0.5, -0.25]);
        assert_eq!(m.generate_residuals(&[1.0, 2.0, 3.0], &[0.0, 1.0]).unwrap(), vec![0.5, -0.25]);
    }

    #[test]
    fn residuals_respond_to_latent() {
        let m = tiny_gen(5);
        let a = m.generate_residuals(&[1.0, -0.5, 0.2], &[0.1, 0.1]).unwrap();
        let b = m.generate_residuals(&[-1.3, 0.4, 0.9], &[0.1, 0.1]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn penalty_lambda_must_be_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = CriticModel::new(
            CriticConfig { hidden: 3, num_blocks: 1, ..CriticConfig::full(2, 1) },
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new();
        let p = critic.bind(&mut g, true);
        let r = g.constant(Tensor::zeros(&[1, 2, 4]));
        let y = g.constant(Tensor::zeros(&[1, 1, 4]));
        let res = wgan_gp_losses(&mut g, &critic, &p, r, r, y, -1.0, &[0.5], &mut Dropout::Off);
        assert!(matches!(res, Err(NetError::Config(_))));
    }

    #[test]
    fn interpolation_endpoints() {
        let real = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fake = Tensor::new(vec![2, 1, 2], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let x = interpolate(&real, &fake, &[0.0, 1.0]).unwrap();
        assert_eq!(x.data(), &[-1.0, -2.0, 3.0, 4.0]);
    }
}
