//! Transformer blocks and their interchangeable feed-forward layers.
//!
//! A block computes
//!
//! ```text
//! Z = W-MHSA(LN(X)) + X
//! Y = FF(LN(Z)) + Z
//! ```
//!
//! where `FF` is the Inception multi-branch convolution, a plain two-layer
//! MLP, or the MLP with two depth-wise convolution stages in the middle.

use std::fmt;
use std::str::FromStr;

use crate::attention::{WindowAttention, WindowSpec};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, ConvSpec, LayerNorm, Linear, VarBuilder};
use crate::ops;
use crate::tensor::Tensor;

/// Output channels of the four Inception branches. A zero width drops the branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchWidths {
    pub b1: usize,
    pub b3: usize,
    pub b5: usize,
    pub bp: usize,
    /// Fraction of the input channels kept by the 3³ and 5³ bottlenecks.
    pub bottleneck_ratio: f64,
}

impl BranchWidths {
    pub const DEFAULT_BOTTLENECK: f64 = 0.125;

    /// Every branch outputs `channels`, concatenating to `4·channels`.
    pub fn equal(channels: usize) -> Self {
        Self::scaled(channels, [1.0; 4], Self::DEFAULT_BOTTLENECK)
    }

    /// The widths under which the Inception layer reduces to an MLP of ratio 4.
    pub fn mlp_equivalent(channels: usize) -> Self {
        BranchWidths {
            b1: 4 * channels,
            b3: 0,
            b5: 0,
            bp: 0,
            bottleneck_ratio: Self::DEFAULT_BOTTLENECK,
        }
    }

    /// Widths `round(ratio·channels)` per branch.
    pub fn scaled(channels: usize, ratios: [f64; 4], bottleneck_ratio: f64) -> Self {
        let w = ratios.map(|r| (r * channels as f64).round().max(0.0) as usize);
        BranchWidths {
            b1: w[0],
            b3: w[1],
            b5: w[2],
            bp: w[3],
            bottleneck_ratio,
        }
    }

    pub fn total(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.bp
    }

    /// `max(1, floor(channels·ratio))`.
    pub fn bottleneck(&self, channels: usize) -> usize {
        ((channels as f64 * self.bottleneck_ratio + 1e-9).floor() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::config("inception branch widths sum to zero"));
        }
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio.is_finite()) {
            return Err(Error::config(format!(
                "bottleneck ratio must be positive, got {}",
                self.bottleneck_ratio
            )));
        }
        Ok(())
    }
}

/// `GELU(BN(conv(x)))` with a shape-preserving odd kernel.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(
        vb: &VarBuilder,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "conv block kernel must be odd, got {kernel}"
            )));
        }
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "{groups} groups do not divide {cin} → {cout} channels"
            )));
        }
        let spec = ConvSpec {
            groups,
            ..ConvSpec::same(kernel, true)
        };
        Ok(ConvBlock {
            conv: Conv3d::new(&vb.pp("conv"), cin, cout, spec),
            bn: BatchNorm::new(&vb.pp("bn"), cout),
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        ops::gelu(&self.bn.forward(&self.conv.forward(x)?, training)?)
    }
}

fn run_chain(chain: &[ConvBlock], x: &Tensor, training: bool) -> Result<Tensor> {
    let mut y = chain[0].forward(x, training)?;
    for block in &chain[1..] {
        y = block.forward(&y, training)?;
    }
    Ok(y)
}

fn token_dims(u: &Tensor, dims: [usize; 3], channels: usize, op: &'static str) -> Result<()> {
    match *u.shape() {
        [_, t, c] if t == dims.iter().product::<usize>() && c == channels => Ok(()),
        _ => Err(Error::dim(
            op,
            format!(
                "tokens {:?} do not match dims {dims:?} with {channels} channels",
                u.shape()
            ),
        )),
    }
}

/// Four parallel convolutional branches, concatenated and projected back to `C`.
#[derive(Clone, Debug)]
pub struct InceptionFF {
    pub widths: BranchWidths,
    pub channels: usize,
    /// `[conv1]`.
    pub branch1: Vec<ConvBlock>,
    /// `[bottleneck 1³, conv 3³]`.
    pub branch3: Vec<ConvBlock>,
    /// `[bottleneck 1³, conv 3³, conv 3³]`.
    pub branch5: Vec<ConvBlock>,
    /// `[conv 1³]` after 3³ average pooling.
    pub branch_pool: Vec<ConvBlock>,
    pub proj: Linear,
}

impl InceptionFF {
    pub fn new(vb: &VarBuilder, channels: usize, widths: BranchWidths) -> Result<Self> {
        widths.validate()?;
        let c = channels;
        let bn = widths.bottleneck(c);
        let block = |name: &str, i: usize, cin, cout, k| {
            ConvBlock::new(&vb.pp(name).pp(i), cin, cout, k, 1)
        };
        let mut ff = InceptionFF {
            widths,
            channels,
            branch1: Vec::new(),
            branch3: Vec::new(),
            branch5: Vec::new(),
            branch_pool: Vec::new(),
            proj: Linear::new(&vb.pp("proj"), widths.total(), c, true),
        };
        if widths.b1 > 0 {
            ff.branch1 = vec![block("branch1", 0, c, widths.b1, 1)?];
        }
        if widths.b3 > 0 {
            ff.branch3 = vec![
                block("branch3", 0, c, bn, 1)?,
                block("branch3", 1, bn, widths.b3, 3)?,
            ];
        }
        if widths.b5 > 0 {
            ff.branch5 = vec![
                block("branch5", 0, c, bn, 1)?,
                block("branch5", 1, bn, bn, 3)?,
                block("branch5", 2, bn, widths.b5, 3)?,
            ];
        }
        if widths.bp > 0 {
            ff.branch_pool = vec![block("branch_pool", 0, c, widths.bp, 1)?];
        }
        Ok(ff)
    }

    /// Branch outputs in concatenation order, as volumes.
    pub fn branches(&self, v: &Tensor, training: bool) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(4);
        if !self.branch1.is_empty() {
            outs.push(run_chain(&self.branch1, v, training)?);
        }
        if !self.branch3.is_empty() {
            outs.push(run_chain(&self.branch3, v, training)?);
        }
        if !self.branch5.is_empty() {
            outs.push(run_chain(&self.branch5, v, training)?);
        }
        if !self.branch_pool.is_empty() {
            let pooled = ops::avg_pool3d(v, 3, 1, 1)?;
            outs.push(run_chain(&self.branch_pool, &pooled, training)?);
        }
        Ok(outs)
    }

    pub fn forward(&self, u: &Tensor, dims: [usize; 3], training: bool) -> Result<Tensor> {
        token_dims(u, dims, self.channels, "inception_ff")?;
        let v = ops::tokens_to_volume(u, dims)?;
        let outs = self.branches(&v, training)?;
        let cat = if outs.len() == 1 {
            outs[0].clone()
        } else {
            ops::concat(&outs, 1)?
        };
        self.proj.forward(&ops::volume_to_tokens(&cat)?)
    }
}

/// Hidden width `round(ratio·channels)`, rejecting non-positive ratios.
pub fn hidden_width(channels: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::config(format!(
            "mlp ratio must be positive, got {ratio}"
        )));
    }
    Ok(((ratio * channels as f64).round() as usize).max(1))
}

/// `fc2(GELU(fc1(u)))`, applied per token.
#[derive(Clone, Debug)]
pub struct MlpFF {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpFF {
    pub fn new(vb: &VarBuilder, channels: usize, ratio: f64) -> Result<Self> {
        let hidden = hidden_width(channels, ratio)?;
        Ok(MlpFF {
            fc1: Linear::new(&vb.pp("fc1"), channels, hidden, true),
            fc2: Linear::new(&vb.pp("fc2"), hidden, channels, true),
        })
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&ops::gelu(&self.fc1.forward(u)?)?)
    }
}

/// MLP with two depth-wise 3³ conv blocks between the linear layers.
#[derive(Clone, Debug)]
pub struct DepthwiseFF {
    pub fc1: Linear,
    pub dw: Vec<ConvBlock>,
    pub fc2: Linear,
    pub channels: usize,
}

impl DepthwiseFF {
    pub fn new(vb: &VarBuilder, channels: usize, ratio: f64) -> Result<Self> {
        let hidden = hidden_width(channels, ratio)?;
        let dw = (0..2)
            .map(|i| ConvBlock::new(&vb.pp("dw").pp(i), hidden, hidden, 3, hidden))
            .collect::<Result<_>>()?;
        Ok(DepthwiseFF {
            fc1: Linear::new(&vb.pp("fc1"), channels, hidden, true),
            dw,
            fc2: Linear::new(&vb.pp("fc2"), hidden, channels, true),
            channels,
        })
    }

    pub fn forward(&self, u: &Tensor, dims: [usize; 3], training: bool) -> Result<Tensor> {
        token_dims(u, dims, self.channels, "depthwise_ff")?;
        let h = self.fc1.forward(u)?;
        let v = run_chain(&self.dw, &ops::tokens_to_volume(&h, dims)?, training)?;
        self.fc2.forward(&ops::volume_to_tokens(&v)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfKind {
    Inception,
    Mlp,
    Depthwise,
}

impl FfKind {
    pub const ALL: [FfKind; 3] = [FfKind::Inception, FfKind::Mlp, FfKind::Depthwise];

    pub fn as_str(&self) -> &'static str {
        match self {
            FfKind::Inception => "inception",
            FfKind::Mlp => "mlp",
            FfKind::Depthwise => "depthwise",
        }
    }
}

impl fmt::Display for FfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FfKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!("unknown ff kind {s:?} (inception, mlp, depthwise)"))
            })
    }
}

/// Hyperparameters of one feed-forward layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FfConfig {
    Inception(BranchWidths),
    Mlp { ratio: f64 },
    Depthwise { ratio: f64 },
}

impl FfConfig {
    pub fn kind(&self) -> FfKind {
        match self {
            FfConfig::Inception(_) => FfKind::Inception,
            FfConfig::Mlp { .. } => FfKind::Mlp,
            FfConfig::Depthwise { .. } => FfKind::Depthwise,
        }
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Inception(InceptionFF),
    Mlp(MlpFF),
    Depthwise(DepthwiseFF),
}

impl FeedForward {
    pub fn new(vb: &VarBuilder, channels: usize, config: FfConfig) -> Result<Self> {
        Ok(match config {
            FfConfig::Inception(w) => FeedForward::Inception(InceptionFF::new(vb, channels, w)?),
            FfConfig::Mlp { ratio } => FeedForward::Mlp(MlpFF::new(vb, channels, ratio)?),
            FfConfig::Depthwise { ratio } => {
                FeedForward::Depthwise(DepthwiseFF::new(vb, channels, ratio)?)
            }
        })
    }

    pub fn forward(&self, u: &Tensor, dims: [usize; 3], training: bool) -> Result<Tensor> {
        match self {
            FeedForward::Inception(ff) => ff.forward(u, dims, training),
            FeedForward::Mlp(ff) => ff.forward(u),
            FeedForward::Depthwise(ff) => ff.forward(u, dims, training),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub ff: FfConfig,
    pub rel_bias: bool,
    pub qkv_bias: bool,
}

/// Pre-norm attention and feed-forward, each wrapped in a residual.
#[derive(Clone, Debug)]
pub struct SwinceptionBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub spec: WindowSpec,
}

impl SwinceptionBlock {
    pub fn new(vb: &VarBuilder, config: &BlockConfig, spec: WindowSpec) -> Result<Self> {
        let c = config.dim;
        if spec.window != config.window {
            return Err(Error::config("block window spec disagrees with its config"));
        }
        Ok(SwinceptionBlock {
            norm1: LayerNorm::new(&vb.pp("norm1"), c),
            attn: WindowAttention::new(
                &vb.pp("attn"),
                c,
                config.heads,
                config.window,
                config.rel_bias,
                config.qkv_bias,
            )?,
            norm2: LayerNorm::new(&vb.pp("norm2"), c),
            ff: FeedForward::new(&vb.pp("ff"), c, config.ff)?,
            spec,
        })
    }

    /// `x`: tokens `[N, T, C]` of a `dims` feature map.
    pub fn forward(&self, x: &Tensor, dims: [usize; 3], training: bool) -> Result<Tensor> {
        let z = ops::add(
            &self
                .attn
                .forward_tokens(&self.norm1.forward(x)?, dims, self.spec)?,
            x,
        )?;
        let v = self.ff.forward(&self.norm2.forward(&z)?, dims, training)?;
        ops::add(&v, &z)
    }
}
