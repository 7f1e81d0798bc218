//! Closed-form parameter counts, computed from the configuration alone.

use std::fmt;

use crate::blocks::{hidden_width, BlockConfig, BranchWidths, FfConfig};
use crate::config::{MergeKind, ModelConfig};
use crate::decoder::DecoderPlan;
use crate::error::Result;
use crate::model::SegmentationModel;

/// Trainable parameter counts by model part. Buffers are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embed: usize,
    pub stages: usize,
    pub merges: usize,
    pub decoder: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embed + self.stages + self.merges + self.decoder + self.head
    }

    pub fn encoder(&self) -> usize {
        self.embed + self.stages + self.merges
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("embed", self.embed),
            ("stages", self.stages),
            ("merges", self.merges),
            ("decoder", self.decoder),
            ("head", self.head),
            ("total", self.total()),
        ];
        for (name, n) in rows {
            writeln!(f, "{name:<8} {n:>12}  ({:.2}M)", n as f64 / 1e6)?;
        }
        Ok(())
    }
}

pub fn linear_params(din: usize, dout: usize, bias: bool) -> usize {
    din * dout + if bias { dout } else { 0 }
}

pub fn conv_params(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * kernel.pow(3) + if bias { cout } else { 0 }
}

/// Conv with bias followed by batch norm (two affine vectors).
fn conv_block_params(cin: usize, cout: usize, kernel: usize, groups: usize) -> usize {
    conv_params(cin, cout, kernel, groups, true) + 2 * cout
}

pub fn attention_params(
    dim: usize,
    heads: usize,
    window: usize,
    rel_bias: bool,
    qkv_bias: bool,
) -> usize {
    let table = if rel_bias {
        (2 * window - 1).pow(3) * heads
    } else {
        0
    };
    linear_params(dim, 3 * dim, qkv_bias) + linear_params(dim, dim, true) + table
}

pub fn inception_params(c: usize, w: &BranchWidths) -> usize {
    let bn = w.bottleneck(c);
    let mut n = linear_params(w.total(), c, true);
    if w.b1 > 0 {
        n += conv_block_params(c, w.b1, 1, 1);
    }
    if w.b3 > 0 {
        n += conv_block_params(c, bn, 1, 1) + conv_block_params(bn, w.b3, 3, 1);
    }
    if w.b5 > 0 {
        n += conv_block_params(c, bn, 1, 1)
            + conv_block_params(bn, bn, 3, 1)
            + conv_block_params(bn, w.b5, 3, 1);
    }
    if w.bp > 0 {
        n += conv_block_params(c, w.bp, 1, 1);
    }
    n
}

pub fn ff_params(c: usize, ff: &FfConfig) -> Result<usize> {
    Ok(match ff {
        FfConfig::Inception(w) => inception_params(c, w),
        FfConfig::Mlp { ratio } => {
            let h = hidden_width(c, *ratio)?;
            linear_params(c, h, true) + linear_params(h, c, true)
        }
        FfConfig::Depthwise { ratio } => {
            let h = hidden_width(c, *ratio)?;
            linear_params(c, h, true)
                + linear_params(h, c, true)
                + 2 * conv_block_params(h, h, 3, h)
        }
    })
}

pub fn block_params(b: &BlockConfig) -> Result<usize> {
    let norms = 2 * 2 * b.dim;
    Ok(norms
        + attention_params(b.dim, b.heads, b.window, b.rel_bias, b.qkv_bias)
        + ff_params(b.dim, &b.ff)?)
}

pub fn merge_params(kind: MergeKind, c: usize) -> usize {
    match kind {
        MergeKind::Linear => 2 * 8 * c + linear_params(8 * c, 2 * c, true),
        MergeKind::Conv => conv_params(c, 2 * c, 3, 1, true) + 2 * 2 * c,
    }
}

/// Residual block with instance norm and PReLU; bias-free convs.
pub fn residual_block_params(cin: usize, cout: usize) -> usize {
    let body = conv_params(cin, cout, 3, 1, false)
        + 2 * cout
        + cout
        + conv_params(cout, cout, 3, 1, false)
        + 2 * cout;
    let projection = if cin != cout {
        conv_params(cin, cout, 1, 1, false) + 2 * cout
    } else {
        0
    };
    body + projection + cout
}

pub fn upsample_block_params(cin: usize, cout: usize) -> usize {
    cin * cout * 8 + 2 * cout + cout
}

pub fn count_params(config: &ModelConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let mut stages = 0;
    for stage in 0..4 {
        stages += config.depths[stage] * block_params(&config.block_config(stage))?;
    }
    let merges = (0..config.num_merges())
        .map(|i| merge_params(config.merge_kind, config.stage_dim(i)))
        .sum();
    let plan = DecoderPlan::new(config);
    let mut decoder = residual_block_params(plan.bottom.0, plan.bottom.1);
    for level in &plan.levels {
        decoder += level.up.map_or(0, |(a, b)| upsample_block_params(a, b));
        decoder += level.skip.map_or(0, |(a, b)| residual_block_params(a, b));
        decoder += residual_block_params(level.fuse.0, level.fuse.1);
    }
    Ok(ParamBreakdown {
        embed: conv_params(config.in_channels, config.base_dim, 2, 1, true),
        stages,
        merges,
        decoder,
        head: conv_params(plan.head.0, plan.head.1, 1, 1, true),
    })
}

/// Tally of the tensors actually allocated by `model`, split like [`count_params`].
pub fn allocated_breakdown(model: &SegmentationModel) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    for entry in model.store.trainable() {
        let n = entry.tensor.numel();
        let name = entry.name.as_str();
        let slot = if name.starts_with("encoder.patch_embed.") {
            &mut b.embed
        } else if name.starts_with("encoder.stages.") {
            &mut b.stages
        } else if name.starts_with("encoder.merges.") {
            &mut b.merges
        } else if name.starts_with("decoder.head.") {
            &mut b.head
        } else {
            &mut b.decoder
        };
        *slot += n;
    }
    b
}

/// One cell of the encoder × decoder × merge × MLP-ratio ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub encoder: &'static str,
    pub decoder: &'static str,
    pub merge: MergeKind,
    pub mlp_ratio: f64,
    pub params: ParamBreakdown,
}

/// The ablation grid over `base`: Swin (MLP, ratios 4 and 7) and Inception
/// encoders, both decoders, both merge kinds.
pub fn ablation_table(base: &ModelConfig) -> Result<Vec<AblationRow>> {
    use crate::blocks::FfKind;
    use crate::config::DecoderKind;
    let mut rows = Vec::new();
    for decoder in [DecoderKind::Swinunetr, DecoderKind::Swinception] {
        for merge in [MergeKind::Linear, MergeKind::Conv] {
            for (ff, ratio, name) in [
                (FfKind::Mlp, 4.0, "swin"),
                (FfKind::Mlp, 7.0, "swin"),
                (FfKind::Inception, 4.0, "swinception"),
            ] {
                let config = ModelConfig {
                    ff_kind: ff,
                    mlp_ratio: ratio,
                    merge_kind: merge,
                    decoder_kind: decoder,
                    ..base.clone()
                };
                rows.push(AblationRow {
                    encoder: name,
                    decoder: decoder.as_str(),
                    merge,
                    mlp_ratio: ratio,
                    params: count_params(&config)?,
                });
            }
        }
    }
    Ok(rows)
}
