//! Architectural hyperparameters.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{BlockConfig, BranchWidths, FfConfig, FfKind};
use crate::error::{Error, Result};

/// Downsampling between encoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeKind {
    /// Gather 2×2×2 neighbourhoods into `8C` channels, layer norm, linear to `2C`.
    Linear,
    /// Overlapping 3³ convolution with stride 2 to `2C`, then layer norm.
    Conv,
}

/// Decoder wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Skips tapped before each merge; three merges in the encoder.
    Swinception,
    /// Skips tapped after each merge; four merges and one extra upsample.
    Swinunetr,
}

macro_rules! str_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $ty::ALL.iter().copied().find(|k| k.as_str() == s).ok_or_else(|| {
                    let names: Vec<&str> = $ty::ALL.iter().map(|k| k.as_str()).collect();
                    Error::config(format!(concat!("unknown ", $what, " {:?} ({})"), s, names.join(", ")))
                })
            }
        }
    };
}

str_enum!(MergeKind, "merge kind", Linear => "linear", Conv => "conv");
str_enum!(DecoderKind, "decoder kind", Swinception => "swinception", Swinunetr => "swinunetr");

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channels after patch embedding, `C0`. Stage `i` works at `C0·2^i`.
    pub base_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub ff_kind: FfKind,
    /// Inception branch widths as multiples of the stage channels.
    pub branch_ratios: [f64; 4],
    pub bottleneck_ratio: f64,
    pub mlp_ratio: f64,
    pub merge_kind: MergeKind,
    pub decoder_kind: DecoderKind,
    pub num_classes: usize,
    pub use_rel_bias: bool,
    pub qkv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            base_dim: 48,
            depths: [2; 4],
            heads: [3, 6, 12, 24],
            window: 4,
            ff_kind: FfKind::Inception,
            branch_ratios: [1.0; 4],
            bottleneck_ratio: BranchWidths::DEFAULT_BOTTLENECK,
            mlp_ratio: 4.0,
            merge_kind: MergeKind::Conv,
            decoder_kind: DecoderKind::Swinception,
            num_classes: 14,
            use_rel_bias: true,
            qkv_bias: true,
        }
    }
}

impl ModelConfig {
    /// Small model for CPU training on 32³ volumes.
    pub fn toy() -> Self {
        ModelConfig {
            base_dim: 8,
            heads: [2, 2, 4, 8],
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.base_dim << stage
    }

    /// Number of merges after the stages: 3 with pre-merge taps, 4 otherwise.
    pub fn num_merges(&self) -> usize {
        match self.decoder_kind {
            DecoderKind::Swinception => 3,
            DecoderKind::Swinunetr => 4,
        }
    }

    /// Inputs are zero-padded to a multiple of this on every axis.
    pub fn pad_multiple(&self) -> usize {
        2 << self.num_merges()
    }

    pub fn ff_config(&self, stage: usize) -> FfConfig {
        match self.ff_kind {
            FfKind::Inception => FfConfig::Inception(BranchWidths::scaled(
                self.stage_dim(stage),
                self.branch_ratios,
                self.bottleneck_ratio,
            )),
            FfKind::Mlp => FfConfig::Mlp {
                ratio: self.mlp_ratio,
            },
            FfKind::Depthwise => FfConfig::Depthwise {
                ratio: self.mlp_ratio,
            },
        }
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            dim: self.stage_dim(stage),
            heads: self.heads[stage],
            window: self.window,
            ff: self.ff_config(stage),
            rel_bias: self.use_rel_bias,
            qkv_bias: self.qkv_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("base_dim", self.base_dim),
            ("window", self.window),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.base_dim > 4096 {
            return Err(Error::config(format!(
                "base_dim {} is unreasonably large",
                self.base_dim
            )));
        }
        for stage in 0..4 {
            let (c, h) = (self.stage_dim(stage), self.heads[stage]);
            if self.depths[stage] == 0 {
                return Err(Error::config(format!("stage {stage} has no blocks")));
            }
            if h == 0 || c % h != 0 {
                return Err(Error::config(format!(
                    "stage {stage}: {c} channels not divisible by {h} heads"
                )));
            }
            match self.ff_config(stage) {
                FfConfig::Inception(w) => w.validate()?,
                FfConfig::Mlp { ratio } | FfConfig::Depthwise { ratio } => {
                    crate::blocks::hidden_width(c, ratio)?;
                }
            }
        }
        if self
            .branch_ratios
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(Error::config(
                "branch ratios must be finite and non-negative",
            ));
        }
        Ok(())
    }
}
