//! Patch embedding, four attention stages, patch merging, and skip taps.

use std::sync::Arc;

use crate::attention::WindowSpec;
use crate::blocks::SwinceptionBlock;
use crate::config::{DecoderKind, MergeKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvSpec, LayerNorm, Linear, VarBuilder};
use crate::ops;
use crate::tensor::Tensor;

/// Strided 2³ convolution from the input channels to `C0`; no norm or activation.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv3d,
}

impl PatchEmbed {
    pub fn new(vb: &VarBuilder, in_channels: usize, dim: usize) -> Self {
        let spec = ConvSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
            groups: 1,
            bias: true,
        };
        PatchEmbed {
            proj: Conv3d::new(&vb.pp("proj"), in_channels, dim, spec),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, dims) = ops::dims3(x.shape(), "patch_embed")?;
        if dims.iter().any(|d| d % 2 != 0) {
            return Err(Error::dim(
                "patch_embed",
                format!("odd extents {dims:?}; pad first"),
            ));
        }
        self.proj.forward(x)
    }
}

/// Halves every extent and doubles the channels.
#[derive(Clone, Debug)]
pub enum PatchMerge {
    Linear { norm: LayerNorm, reduction: Linear },
    Conv { conv: Conv3d, norm: LayerNorm },
}

/// Gather index for `[N, C, D, H, W]` → `[N, D/2·H/2·W/2, 8C]`; the eight
/// neighbours appear in `(dz, dy, dx)` lexicographic order, `C` each.
fn neighbourhood_index(n: usize, c: usize, [d, h, w]: [usize; 3]) -> Vec<usize> {
    let [od, oh, ow] = [d / 2, h / 2, w / 2];
    let mut index = Vec::with_capacity(n * c * d * h * w);
    for b in 0..n {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    for off in 0..8 {
                        let (dz, dy, dx) = (off >> 2, (off >> 1) & 1, off & 1);
                        let voxel = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
                        index.extend((0..c).map(|ch| (b * c + ch) * d * h * w + voxel));
                    }
                }
            }
        }
    }
    index
}

impl PatchMerge {
    pub fn new(vb: &VarBuilder, kind: MergeKind, dim: usize) -> Self {
        match kind {
            MergeKind::Linear => PatchMerge::Linear {
                norm: LayerNorm::new(&vb.pp("norm"), 8 * dim),
                reduction: Linear::new(&vb.pp("reduction"), 8 * dim, 2 * dim, true),
            },
            MergeKind::Conv => PatchMerge::Conv {
                conv: Conv3d::new(
                    &vb.pp("conv"),
                    dim,
                    2 * dim,
                    ConvSpec {
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        groups: 1,
                        bias: true,
                    },
                ),
                norm: LayerNorm::new(&vb.pp("norm"), 2 * dim),
            },
        }
    }

    /// `[N, C, D, H, W]` → `[N, 2C, D/2, H/2, W/2]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, dims) = ops::dims3(x.shape(), "patch_merge")?;
        if dims.iter().any(|d| d % 2 != 0) {
            return Err(Error::dim("patch_merge", format!("odd extents {dims:?}")));
        }
        let out = dims.map(|d| d / 2);
        let tokens = match self {
            PatchMerge::Linear { norm, reduction } => {
                let index: Arc<[usize]> = neighbourhood_index(n, c, dims).into();
                let gathered = ops::gather(x, index, &[n, out.iter().product(), 8 * c])?;
                reduction.forward(&norm.forward(&gathered)?)?
            }
            PatchMerge::Conv { conv, norm } => {
                norm.forward(&ops::volume_to_tokens(&conv.forward(x)?)?)?
            }
        };
        ops::tokens_to_volume(&tokens, out)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinceptionBlock>,
}

impl Stage {
    pub fn new(vb: &VarBuilder, config: &ModelConfig, stage: usize) -> Result<Self> {
        let block = config.block_config(stage);
        let blocks = (0..config.depths[stage])
            .map(|i| {
                let spec = WindowSpec::for_block(config.window, i);
                SwinceptionBlock::new(&vb.pp("blocks").pp(i), &block, spec)
            })
            .collect::<Result<_>>()?;
        Ok(Stage { blocks })
    }

    /// Volume in, volume out.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (_, _, dims) = ops::dims3(x.shape(), "stage")?;
        let mut t = ops::volume_to_tokens(x)?;
        for block in &self.blocks {
            t = block.forward(&t, dims, training)?;
        }
        ops::tokens_to_volume(&t, dims)
    }
}

/// Multi-scale encoder outputs, shallowest first, as volumes.
///
/// With pre-merge taps `levels[0]` is the patch embedding and `levels[i]`
/// the output of stage `i` (`C0·2^(i−1)` channels at `/2^max(i,1)`). With
/// post-merge taps `levels[i]` for `i ≥ 1` is the merged output of stage `i`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub merges: Vec<PatchMerge>,
    pub kind: DecoderKind,
}

impl Encoder {
    pub fn new(vb: &VarBuilder, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let stages = (0..4)
            .map(|i| Stage::new(&vb.pp("stages").pp(i), config, i))
            .collect::<Result<_>>()?;
        let merges = (0..config.num_merges())
            .map(|i| {
                PatchMerge::new(
                    &vb.pp("merges").pp(i),
                    config.merge_kind,
                    config.stage_dim(i),
                )
            })
            .collect();
        Ok(Encoder {
            embed: PatchEmbed::new(&vb.pp("patch_embed"), config.in_channels, config.base_dim),
            stages,
            merges,
            kind: config.decoder_kind,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<FeaturePyramid> {
        let mut h = self.embed.forward(x)?;
        let mut levels = vec![h.clone()];
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(&h, training)?;
            match self.kind {
                DecoderKind::Swinception => {
                    levels.push(h.clone());
                    if let Some(merge) = self.merges.get(i) {
                        h = merge.forward(&h)?;
                    }
                }
                DecoderKind::Swinunetr => {
                    h = self.merges[i].forward(&h)?;
                    levels.push(h.clone());
                }
            }
        }
        Ok(FeaturePyramid { levels })
    }
}
