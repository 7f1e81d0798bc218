//! Convolutional decoder: residual blocks, transposed-conv upsampling, and
//! bottom-up skip fusion down to the input resolution.

use crate::config::{DecoderKind, ModelConfig};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvSpec, ConvTranspose3d, InstanceNorm, PRelu, VarBuilder};
use crate::ops;
use crate::tensor::Tensor;

/// 1³ convolution and instance norm matching the residual to the output width.
#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

/// `PReLU(IN(conv(PReLU(IN(conv(x))))) + shortcut(x))`, 3³ kernels.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub norm1: InstanceNorm,
    pub act1: PRelu,
    pub conv2: Conv3d,
    pub norm2: InstanceNorm,
    pub projection: Option<Projection>,
    pub act: PRelu,
}

impl ResidualBlock {
    pub fn new(vb: &VarBuilder, cin: usize, cout: usize) -> Self {
        let k3 = ConvSpec::same(3, false);
        let projection = (cin != cout).then(|| Projection {
            conv: Conv3d::new(&vb.pp("conv3"), cin, cout, ConvSpec::same(1, false)),
            norm: InstanceNorm::new(&vb.pp("norm3"), cout),
        });
        ResidualBlock {
            conv1: Conv3d::new(&vb.pp("conv1"), cin, cout, k3),
            norm1: InstanceNorm::new(&vb.pp("norm1"), cout),
            act1: PRelu::new(&vb.pp("act1"), cout),
            conv2: Conv3d::new(&vb.pp("conv2"), cout, cout, k3),
            norm2: InstanceNorm::new(&vb.pp("norm2"), cout),
            projection,
            act: PRelu::new(&vb.pp("act"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self
            .act1
            .forward(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let shortcut = match &self.projection {
            Some(p) => p.norm.forward(&p.conv.forward(x)?)?,
            None => x.clone(),
        };
        self.act.forward(&ops::add(&h, &shortcut)?)
    }
}

/// 2³ transposed convolution with stride 2, then instance norm and PReLU.
/// The convolution has no bias: instance norm would cancel it.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub tconv: ConvTranspose3d,
    pub norm: InstanceNorm,
    pub act: PRelu,
}

impl UpsampleBlock {
    pub fn new(vb: &VarBuilder, cin: usize, cout: usize) -> Self {
        UpsampleBlock {
            tconv: ConvTranspose3d::new(&vb.pp("tconv"), cin, cout, 2, 2, false),
            norm: InstanceNorm::new(&vb.pp("norm"), cout),
            act: PRelu::new(&vb.pp("act"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.act
            .forward(&self.norm.forward(&self.tconv.forward(x)?)?)
    }
}

/// One fusion step: optional upsample of the running features, optional
/// residual block on the skip, and a residual block on their concatenation.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: Option<UpsampleBlock>,
    pub skip: Option<ResidualBlock>,
    pub fuse: ResidualBlock,
}

impl DecoderLevel {
    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let x = match &self.up {
            Some(up) => up.forward(x)?,
            None => x.clone(),
        };
        let skip = match &self.skip {
            Some(block) => block.forward(skip)?,
            None => skip.clone(),
        };
        if x.shape()[2..] != skip.shape()[2..] {
            return Err(Error::dim(
                "decoder",
                format!("upsampled {:?} vs skip {:?}", x.shape(), skip.shape()),
            ));
        }
        self.fuse.forward(&ops::concat(&[x, skip], 1)?)
    }
}

/// Channel plan of one level: `(up_in, up_out)` when upsampling, the skip
/// block `(in, out)` when present, and the fuse block `(in, out)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelPlan {
    pub up: Option<(usize, usize)>,
    pub skip: Option<(usize, usize)>,
    pub fuse: (usize, usize),
}

/// Bottom block `(in, out)`, levels deepest first (stem last), head `(in, out)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderPlan {
    pub bottom: (usize, usize),
    pub levels: Vec<LevelPlan>,
    pub head: (usize, usize),
}

impl DecoderPlan {
    pub fn new(config: &ModelConfig) -> Self {
        let f = config.base_dim;
        let fuse = |up: usize, skip: usize, out: usize| (up + skip, out);
        let mut levels = Vec::new();
        let bottom = match config.decoder_kind {
            DecoderKind::Swinception => {
                // Pre-merge taps: l1..l4 carry f, f, 2f, 4f, 8f (l0 first); the
                // level i path works at f·2^i and l0 shares l1's resolution.
                for i in (1..4).rev() {
                    let (width, tap) = (f << i, f << (i - 1));
                    levels.push(LevelPlan {
                        up: Some((2 * width, width)),
                        skip: Some((tap, width)),
                        fuse: fuse(width, width, width),
                    });
                }
                levels.push(LevelPlan {
                    up: None,
                    skip: Some((f, f)),
                    fuse: fuse(2 * f, f, f),
                });
                (8 * f, 16 * f)
            }
            DecoderKind::Swinunetr => {
                // Post-merge taps: hs0 = f, hs_i = f·2^i; the deepest skip is raw.
                for i in (0..4).rev() {
                    let width = f << i;
                    levels.push(LevelPlan {
                        up: Some((2 * width, width)),
                        skip: (i != 3).then_some((width, width)),
                        fuse: fuse(width, width, width),
                    });
                }
                (16 * f, 16 * f)
            }
        };
        levels.push(LevelPlan {
            up: Some((f, f)),
            skip: Some((config.in_channels, f)),
            fuse: fuse(f, f, f),
        });
        DecoderPlan {
            bottom,
            levels,
            head: (f, config.num_classes),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub bottom: ResidualBlock,
    /// Deepest first; the last level fuses the raw input.
    pub levels: Vec<DecoderLevel>,
    pub head: Conv3d,
}

impl Decoder {
    pub fn new(vb: &VarBuilder, config: &ModelConfig) -> Self {
        let plan = DecoderPlan::new(config);
        let levels = plan
            .levels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let vb = vb.pp("levels").pp(i);
                DecoderLevel {
                    up: p.up.map(|(a, b)| UpsampleBlock::new(&vb.pp("up"), a, b)),
                    skip: p
                        .skip
                        .map(|(a, b)| ResidualBlock::new(&vb.pp("skip"), a, b)),
                    fuse: ResidualBlock::new(&vb.pp("fuse"), p.fuse.0, p.fuse.1),
                }
            })
            .collect();
        let (hin, hout) = plan.head;
        Decoder {
            bottom: ResidualBlock::new(&vb.pp("bottom"), plan.bottom.0, plan.bottom.1),
            levels,
            head: Conv3d::new(&vb.pp("head"), hin, hout, ConvSpec::same(1, true)),
        }
    }

    /// Logits at the resolution of `raw`, which must be the (padded) encoder input.
    pub fn forward(&self, pyramid: &FeaturePyramid, raw: &Tensor) -> Result<Tensor> {
        let taps = &pyramid.levels;
        if taps.len() != self.levels.len() {
            return Err(Error::dim(
                "decoder",
                format!(
                    "{} pyramid levels for {} decoder levels",
                    taps.len(),
                    self.levels.len()
                ),
            ));
        }
        let mut x = self.bottom.forward(&taps[taps.len() - 1])?;
        let skips = taps[..taps.len() - 1]
            .iter()
            .rev()
            .chain(std::iter::once(raw));
        for (level, skip) in self.levels.iter().zip(skips) {
            x = level.forward(&x, skip)?;
        }
        self.head.forward(&x)
    }
}
