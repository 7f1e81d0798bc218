//! Named model fragments with seeded parameters, shared by the gradient
//! checks and the receptive-field probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{WindowAttention, WindowSpec};
use crate::blocks::{
    BlockConfig, BranchWidths, ConvBlock, DepthwiseFF, FfConfig, InceptionFF, MlpFF,
    SwinceptionBlock,
};
use crate::config::{MergeKind, ModelConfig};
use crate::decoder::{ResidualBlock, UpsampleBlock};
use crate::encoder::{PatchEmbed, PatchMerge};
use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::nn::{
    BatchNorm, Conv3d, ConvSpec, ConvTranspose3d, InstanceNorm, LayerNorm, Linear, PRelu,
    ParamStore,
};
use crate::ops;
use crate::tensor::Tensor;

use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::loss::dice_ce_loss;
use super::probe::{receptive_field_probe, Influence};

type Forward = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FragmentSpec {
    pub channels: usize,
    pub dims: [usize; 3],
    pub batch: usize,
    pub heads: usize,
    pub window: usize,
    /// Batch norm uses batch statistics when set, running statistics otherwise.
    pub training: bool,
    pub seed: u64,
}

impl Default for FragmentSpec {
    fn default() -> Self {
        FragmentSpec {
            channels: 8,
            dims: [8; 3],
            batch: 1,
            heads: 2,
            window: 4,
            training: false,
            seed: 0,
        }
    }
}

/// A closure over seeded parameters mapping a `[N, C, D, H, W]` input to a tensor.
pub struct Fragment {
    pub name: &'static str,
    pub store: ParamStore,
    pub input_shape: Vec<usize>,
    forward: Forward,
}

/// Every fragment name, in the order the gradient suite runs them.
pub const FRAGMENTS: &[&str] = &[
    "linear",
    "conv3d",
    "conv3d_strided",
    "conv_transpose3d",
    "avg_pool3d",
    "layer_norm",
    "batch_norm",
    "instance_norm",
    "gelu",
    "prelu",
    "softmax",
    "w_mhsa",
    "w_mhsa_shifted",
    "conv_block",
    "mlp_ff",
    "inception_ff",
    "depthwise_ff",
    "block",
    "block_mlp",
    "two_blocks",
    "patch_embed",
    "patch_merge_linear",
    "patch_merge_conv",
    "residual_block",
    "upsample_block",
    "dice_ce_loss",
    "model",
];

/// Applies a token-layout function to a volume.
fn via_tokens(x: &Tensor, f: impl FnOnce(&Tensor, [usize; 3]) -> Result<Tensor>) -> Result<Tensor> {
    let (_, _, dims) = ops::dims3(x.shape(), "fragment")?;
    let y = f(&ops::volume_to_tokens(x)?, dims)?;
    ops::tokens_to_volume(&y, dims)
}

impl Fragment {
    pub fn build(name: &str, spec: &FragmentSpec) -> Result<Fragment> {
        let store = ParamStore::new(spec.seed);
        let vb = store.root();
        let c = spec.channels;
        let [d, h, w] = spec.dims;
        let mut input_shape = vec![spec.batch, c, d, h, w];
        let training = spec.training;
        let block_config = |ff: FfConfig| BlockConfig {
            dim: c,
            heads: spec.heads,
            window: spec.window,
            ff,
            rel_bias: true,
            qkv_bias: true,
        };
        let (name, forward): (&'static str, Forward) = match name {
            "linear" => {
                let l = Linear::new(&vb.pp("linear"), c, c + 1, true);
                (
                    "linear",
                    Box::new(move |x| via_tokens(x, |t, _| l.forward(t))),
                )
            }
            "conv3d" => {
                let l = Conv3d::new(&vb.pp("conv"), c, c, ConvSpec::same(3, true));
                ("conv3d", Box::new(move |x| l.forward(x)))
            }
            "conv3d_strided" => {
                let spec = ConvSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    groups: 1,
                    bias: true,
                };
                let l = Conv3d::new(&vb.pp("conv"), c, c, spec);
                ("conv3d_strided", Box::new(move |x| l.forward(x)))
            }
            "conv_transpose3d" => {
                let l = ConvTranspose3d::new(&vb.pp("tconv"), c, c, 2, 2, true);
                ("conv_transpose3d", Box::new(move |x| l.forward(x)))
            }
            "avg_pool3d" => ("avg_pool3d", Box::new(|x| ops::avg_pool3d(x, 3, 1, 1))),
            "layer_norm" => {
                let l = LayerNorm::new(&vb.pp("norm"), c);
                (
                    "layer_norm",
                    Box::new(move |x| via_tokens(x, |t, _| l.forward(t))),
                )
            }
            "batch_norm" => {
                let l = BatchNorm::new(&vb.pp("bn"), c);
                ("batch_norm", Box::new(move |x| l.forward(x, true)))
            }
            "instance_norm" => {
                let l = InstanceNorm::new(&vb.pp("norm"), c);
                ("instance_norm", Box::new(move |x| l.forward(x)))
            }
            "gelu" => ("gelu", Box::new(ops::gelu)),
            "prelu" => {
                let l = PRelu::new(&vb.pp("act"), c);
                ("prelu", Box::new(move |x| l.forward(x)))
            }
            "softmax" => ("softmax", Box::new(|x| ops::softmax(x, 1))),
            "w_mhsa" | "w_mhsa_shifted" => {
                let attn =
                    WindowAttention::new(&vb.pp("attn"), c, spec.heads, spec.window, true, true)?;
                let shifted = name == "w_mhsa_shifted";
                let ws = if shifted {
                    WindowSpec::shifted(spec.window)
                } else {
                    WindowSpec::regular(spec.window)
                };
                let name = if shifted { "w_mhsa_shifted" } else { "w_mhsa" };
                (name, Box::new(move |x| attn.forward(x, ws)))
            }
            "conv_block" => {
                let l = ConvBlock::new(&vb.pp("block"), c, c, 3, 1)?;
                ("conv_block", Box::new(move |x| l.forward(x, training)))
            }
            "mlp_ff" => {
                let l = MlpFF::new(&vb.pp("ff"), c, 4.0)?;
                (
                    "mlp_ff",
                    Box::new(move |x| via_tokens(x, |t, _| l.forward(t))),
                )
            }
            "inception_ff" => {
                let l = InceptionFF::new(&vb.pp("ff"), c, BranchWidths::equal(c))?;
                (
                    "inception_ff",
                    Box::new(move |x| via_tokens(x, |t, dims| l.forward(t, dims, training))),
                )
            }
            "depthwise_ff" => {
                let l = DepthwiseFF::new(&vb.pp("ff"), c, 2.0)?;
                (
                    "depthwise_ff",
                    Box::new(move |x| via_tokens(x, |t, dims| l.forward(t, dims, training))),
                )
            }
            "block" | "block_mlp" => {
                let (ff, name) = if name == "block" {
                    (FfConfig::Inception(BranchWidths::equal(c)), "block")
                } else {
                    (FfConfig::Mlp { ratio: 4.0 }, "block_mlp")
                };
                let b = SwinceptionBlock::new(
                    &vb.pp("block"),
                    &block_config(ff),
                    WindowSpec::regular(spec.window),
                )?;
                (
                    name,
                    Box::new(move |x| via_tokens(x, |t, dims| b.forward(t, dims, training))),
                )
            }
            "two_blocks" => {
                let cfg = block_config(FfConfig::Mlp { ratio: 4.0 });
                let b0 = SwinceptionBlock::new(
                    &vb.pp("blocks.0"),
                    &cfg,
                    WindowSpec::for_block(spec.window, 0),
                )?;
                let b1 = SwinceptionBlock::new(
                    &vb.pp("blocks.1"),
                    &cfg,
                    WindowSpec::for_block(spec.window, 1),
                )?;
                let f = move |t: &Tensor, dims| {
                    b1.forward(&b0.forward(t, dims, training)?, dims, training)
                };
                ("two_blocks", Box::new(move |x| via_tokens(x, &f)))
            }
            "patch_embed" => {
                let l = PatchEmbed::new(&vb.pp("embed"), c, 2 * c);
                ("patch_embed", Box::new(move |x| l.forward(x)))
            }
            "patch_merge_linear" | "patch_merge_conv" => {
                let (kind, name) = if name == "patch_merge_linear" {
                    (MergeKind::Linear, "patch_merge_linear")
                } else {
                    (MergeKind::Conv, "patch_merge_conv")
                };
                let l = PatchMerge::new(&vb.pp("merge"), kind, c);
                (name, Box::new(move |x| l.forward(x)))
            }
            "residual_block" => {
                let l = ResidualBlock::new(&vb.pp("res"), c, c + 2);
                ("residual_block", Box::new(move |x| l.forward(x)))
            }
            "upsample_block" => {
                let l = UpsampleBlock::new(&vb.pp("up"), c, c / 2 + 1);
                ("upsample_block", Box::new(move |x| l.forward(x)))
            }
            "dice_ce_loss" => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
                let labels: Vec<usize> = (0..spec.batch * d * h * w)
                    .map(|_| rng.random_range(0..c))
                    .collect();
                ("dice_ce_loss", Box::new(move |x| dice_ce_loss(x, &labels)))
            }
            "model" => {
                let config = ModelConfig {
                    base_dim: c,
                    heads: [1, 2, 2, 4].map(|n: usize| n.min(c)),
                    window: spec.window,
                    num_classes: 3,
                    ..ModelConfig::toy()
                };
                let model = SegmentationModel::new(config, spec.seed)?;
                input_shape = vec![spec.batch, 1, d, h, w];
                let store = model.store.clone();
                let forward: Forward = Box::new(move |x| model.forward(x, training));
                return Ok(Fragment {
                    name: "model",
                    store,
                    input_shape,
                    forward,
                });
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown fragment {other:?}; known: {}",
                    FRAGMENTS.join(", ")
                )))
            }
        };
        Ok(Fragment {
            name,
            store,
            input_shape,
            forward,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        (self.forward)(x)
    }

    /// Seeded uniform `[-1, 1)` input that requires a gradient.
    pub fn random_input(&self, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.input_shape.iter().product::<usize>();
        Tensor::param(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &self.input_shape,
        )
    }

    /// Gives every batch norm populated unit statistics so eval mode works
    /// without a training pass.
    pub fn warm_up(&self) -> Result<()> {
        self.store.set_batch_norm_identity_stats()
    }

    /// Finite-difference check against the input and every trainable parameter.
    pub fn grad_check(&self, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        let x = self.random_input(cfg.seed.wrapping_add(1))?;
        let mut inputs = vec![("input".to_string(), x.clone())];
        inputs.extend(
            self.store
                .trainable()
                .into_iter()
                .map(|e| (e.name, e.tensor)),
        );
        grad_check(|| self.forward(&x), &inputs, cfg)
    }

    /// Influence of input voxels on output voxel `source`.
    pub fn probe(&self, source: [usize; 3], seed: u64) -> Result<Influence> {
        receptive_field_probe(|x| self.forward(x), &self.input_shape, source, seed)
    }
}

/// Fragment and checker settings used by the gradient suite for `name`.
///
/// Operator fragments run on a 4-channel 8³ volume and probe up to 200
/// coordinates per tensor. The full model runs on the 32³ toy input and
/// probes one coordinate in each of 40 sampled tensors, since every probe
/// costs two forward passes.
pub fn suite_settings(name: &str, tolerance: f64) -> (FragmentSpec, GradCheckConfig) {
    let cfg = GradCheckConfig::with_tolerance(tolerance);
    if name == "model" {
        let spec = FragmentSpec {
            channels: 8,
            dims: [32; 3],
            ..FragmentSpec::default()
        };
        (
            spec,
            GradCheckConfig {
                max_coords: 1,
                max_tensors: Some(40),
                ..cfg
            },
        )
    } else {
        (
            FragmentSpec {
                channels: 4,
                ..FragmentSpec::default()
            },
            cfg,
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seconds: f64,
}

/// Gradient checks of the named fragments (every fragment when `names` is
/// empty) with batch norm in eval mode on unit statistics.
pub fn gradient_suite(
    names: &[&str],
    tolerance: f64,
    mut progress: impl FnMut(&SuiteEntry),
) -> Result<Vec<SuiteEntry>> {
    let names: Vec<&str> = if names.is_empty() {
        FRAGMENTS.to_vec()
    } else {
        names.to_vec()
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let start = std::time::Instant::now();
        let (spec, cfg) = suite_settings(name, tolerance);
        let fragment = Fragment::build(name, &spec)?;
        fragment.warm_up()?;
        let report = fragment.grad_check(&cfg)?;
        let entry = SuiteEntry {
            name: fragment.name,
            report,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&entry);
        out.push(entry);
    }
    Ok(out)
}

/// Builds `name` with default settings in eval mode and probes output voxel
/// `source`, or the volume centre when `None`.
pub fn probe_fragment(
    name: &str,
    source: Option<[usize; 3]>,
    seed: u64,
) -> Result<(Fragment, Influence)> {
    let spec = FragmentSpec {
        seed,
        ..FragmentSpec::default()
    };
    let fragment = Fragment::build(name, &spec)?;
    fragment.warm_up()?;
    let source = source.unwrap_or(spec.dims.map(|d| d / 2));
    let influence = fragment.probe(source, seed)?;
    Ok((fragment, influence))
}
