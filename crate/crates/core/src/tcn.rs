//! Temporal convolutional networks: dilated causal convolutions stacked in
//! residual blocks, framed by 1×1 input and output projections.
//!
//! Every convolution zero-pads on the left so sequence length is preserved,
//! and every convolution kernel is weight-normalized (per output channel,
//! `W = g·v/‖v‖`).

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::params::{ParamSet, StoredTensor};

#[derive(Debug, Error)]
pub enum TcnError {
    #[error("invalid TCN configuration: {0}")]
    Config(String),
    #[error("non-finite input to {0}")]
    Numeric(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TcnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    /// `C_0, C_1, …, C_L`: width after the input map and after each block.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub dropout: f64,
    pub weight_norm: bool,
    /// Standard deviation of the normal initialization of hidden convolutions.
    pub init_std: f64,
    /// Standard deviation for the output projection.
    pub output_init_std: f64,
}

impl TcnConfig {
    /// Uniform-width network with `num_blocks` residual blocks.
    pub fn uniform(
        input_channels: usize,
        hidden: usize,
        output_channels: usize,
        kernel_size: usize,
        dilation_base: usize,
        num_blocks: usize,
    ) -> Self {
        Self {
            input_channels,
            output_channels,
            channels: vec![hidden; num_blocks + 1],
            kernel_size,
            dilation_base,
            dropout: 0.0,
            weight_norm: true,
            init_std: 0.5,
            output_init_std: 0.5,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 1 || self.dilation_base < 1 {
            return Err(TcnError::Config("kernel size and dilation base must be positive".into()));
        }
        if self.num_blocks() < 1 {
            return Err(TcnError::Config("at least one residual block is required".into()));
        }
        if self.channels.iter().chain([&self.input_channels, &self.output_channels]).any(|&c| c == 0) {
            return Err(TcnError::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TcnError::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std >= 0.0 && self.output_init_std >= 0.0) {
            return Err(TcnError::Config("initialization scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel_size, self.dilation_base, self.num_blocks())
    }
}

/// Number of input steps that influence one output step:
/// `1 + 2(k−1)·(D^L−1)/(D−1)`, i.e. `1 + 2(k−1)·Σ_{ℓ<L} D^ℓ`, which also
/// covers the `D = 1` limit `1 + 2(k−1)L`.
pub fn receptive_field(kernel_size: usize, dilation_base: usize, num_blocks: usize) -> usize {
    let geometric: usize = (0..num_blocks).map(|l| dilation_base.pow(l as u32)).sum();
    1 + 2 * (kernel_size - 1) * geometric
}

/// Dropout behaviour for one forward pass.
pub enum Dropout<'a> {
    Off,
    On(&'a mut ChaCha8Rng),
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Dropout::On(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let n = g.value(x).len();
                let mask: Vec<f64> =
                    (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                Ok(g.mask(x, Rc::new(mask))?)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    direction: usize,
    gain: Option<usize>,
    bias: usize,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    dilation: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init(
        params: &mut ParamSet,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        std: f64,
        weight_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = vec![0.0; kernel * c_in * c_out];
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in w.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        let gain = weight_norm.then(|| {
            let mut norms = vec![0.0; c_out];
            for (idx, v) in w.iter().enumerate() {
                norms[idx % c_out] += v * v;
            }
            let norms: Vec<f64> = norms.into_iter().map(f64::sqrt).collect();
            params.push(format!("{name}.gain"), Tensor::new(vec![1, 1, c_out], norms).expect("shape"))
        });
        let direction = params.push(format!("{name}.weight"), Tensor::new(vec![kernel, c_in, c_out], w).expect("shape"));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[1, c_out, 1]));
        Self { direction, gain, bias, kernel, c_in, c_out, dilation }
    }

    fn weight(&self, g: &mut Graph, bound: &[Var]) -> Result<Var> {
        let v = bound[self.direction];
        let Some(gain) = self.gain else { return Ok(v) };
        let sq = g.square(v);
        let s0 = g.sum_axis(sq, 0)?;
        let s1 = g.sum_axis(s0, 1)?;
        let norm = g.sqrt(s1)?;
        let inv = g.recip(norm);
        let factor = g.mul(bound[gain], inv)?;
        let factor = g.broadcast_to(factor, &[self.kernel, self.c_in, self.c_out])?;
        Ok(g.mul(v, factor)?)
    }

    fn apply(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        let w = self.weight(g, bound)?;
        let y = g.conv1d(x, w, self.dilation)?;
        let shape = g.shape(y).to_vec();
        let b = g.broadcast_to(bound[self.bias], &shape)?;
        Ok(g.add(y, b)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    skip: Option<ConvLayer>,
}

/// Parameters and layer layout of one TCN.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnNetwork {
    config: TcnConfig,
    params: ParamSet,
    input_map: ConvLayer,
    blocks: Vec<ResidualBlock>,
    output_map: ConvLayer,
}

/// Result of [`TcnNetwork::run`].
#[derive(Debug, Clone)]
pub struct TcnOutput {
    pub values: Tensor,
    /// Set when the input is shorter than the receptive field, so that every
    /// output position saw some zero padding.
    pub short_input: bool,
}

impl TcnNetwork {
    pub fn new(config: TcnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let wn = config.weight_norm;
        let input_map = ConvLayer::init(
            &mut params,
            "input",
            1,
            config.input_channels,
            config.channels[0],
            1,
            config.init_std,
            wn,
            rng,
        );
        let mut blocks = Vec::with_capacity(config.num_blocks());
        for l in 0..config.num_blocks() {
            let (c_in, c_out) = (config.channels[l], config.channels[l + 1]);
            let d = config.dilation_base.pow(l as u32);
            let k = config.kernel_size;
            let conv1 = ConvLayer::init(&mut params, &format!("block{l}.conv1"), k, c_in, c_out, d, config.init_std, wn, rng);
            let conv2 = ConvLayer::init(&mut params, &format!("block{l}.conv2"), k, c_out, c_out, d, config.init_std, wn, rng);
            let skip = (c_in != c_out).then(|| {
                ConvLayer::init(&mut params, &format!("block{l}.skip"), 1, c_in, c_out, 1, config.init_std, wn, rng)
            });
            blocks.push(ResidualBlock { conv1, conv2, skip });
        }
        let output_map = ConvLayer::init(
            &mut params,
            "output",
            1,
            *config.channels.last().expect("validated"),
            config.output_channels,
            1,
            config.output_init_std,
            wn,
            rng,
        );
        Ok(Self { config, params, input_map, blocks, output_map })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    pub fn to_stored(&self) -> Vec<StoredTensor> {
        self.params.to_stored()
    }

    pub fn load_stored(&mut self, stored: &[StoredTensor]) -> std::result::Result<(), String> {
        self.params.load_stored(stored)
    }

    /// Graph-level forward pass over `x: [batch, input_channels, time]`.
    ///
    /// `bound` are the parameter leaves returned by `params().bind(..)`.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var, dropout: &mut Dropout<'_>) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.config.input_channels {
            return Err(AutodiffError::Dimension {
                op: "tcn_forward",
                detail: format!("expected [batch, {}, time], got {shape:?}", self.config.input_channels),
            }
            .into());
        }
        let mut h = self.input_map.apply(g, bound, x)?;
        for block in &self.blocks {
            h = self.block_forward(g, bound, block, h, dropout)?;
        }
        self.output_map.apply(g, bound, h)
    }

    fn block_forward(
        &self,
        g: &mut Graph,
        bound: &[Var],
        block: &ResidualBlock,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let h = block.conv1.apply(g, bound, x)?;
        let h = g.relu(h);
        let h = dropout.apply(g, h, self.config.dropout)?;
        let h = block.conv2.apply(g, bound, h)?;
        let h = g.relu(h);
        let skip = match &block.skip {
            Some(proj) => proj.apply(g, bound, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }

    /// Apply residual block `index` on its own (dilation `D^index`).
    pub fn residual_block(&self, g: &mut Graph, bound: &[Var], index: usize, x: Var, dropout: &mut Dropout<'_>) -> Result<Var> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| TcnError::Config(format!("block {index} out of range")))?;
        self.block_forward(g, bound, block, x, dropout)
    }

    /// Inference on a `[batch, channels, time]` tensor without dropout.
    pub fn run(&self, x: &Tensor) -> Result<TcnOutput> {
        if !x.is_finite() {
            return Err(TcnError::Numeric("tcn_forward"));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, &mut Dropout::Off)?;
        let short_input = x.shape().get(2).is_some_and(|&t| t < self.receptive_field());
        Ok(TcnOutput { values: g.value(out).clone(), short_input })
    }
}

/// Single dilated causal convolution of `x: [c_in, time]` with
/// `weights: [kernel, c_in, c_out]` and `bias: [c_out]`.
pub fn dilated_causal_conv(x: &Tensor, weights: &Tensor, bias: &[f64], dilation: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(TcnError::Numeric("dilated_causal_conv"));
    }
    let (c_in, t) = match x.shape() {
        &[c, t] => (c, t),
        s => return Err(TcnError::Config(format!("expected [channels, time] input, got {s:?}"))),
    };
    let c_out = *weights.shape().last().unwrap_or(&0);
    if bias.len() != c_out {
        return Err(TcnError::Config(format!("bias has {} entries for {c_out} output channels", bias.len())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(vec![1, c_in, t])?);
    let wv = g.constant(weights.clone());
    let y = g.conv1d(xv, wv, dilation)?;
    let mut out = g.value(y).clone().reshape(vec![c_out, t])?;
    for (c, b) in bias.iter().enumerate() {
        for v in &mut out.data_mut()[c * t..(c + 1) * t] {
            *v += b;
        }
    }
    Ok(out)
}
