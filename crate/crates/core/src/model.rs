//! Encoder and decoder assembled into a segmentation network.

use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, VarBuilder};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct SegmentationModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SegmentationModel {
    /// Allocates every parameter from a ChaCha stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        Self::with_builder(config, &store.root(), store.clone())
    }

    fn with_builder(config: ModelConfig, vb: &VarBuilder, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&vb.pp("encoder"), &config)?;
        let decoder = Decoder::new(&vb.pp("decoder"), &config);
        Ok(SegmentationModel {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Extents after zero-padding to the encoder's multiple.
    pub fn padded_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let m = self.config.pad_multiple();
        dims.map(|d| d.div_ceil(m) * m)
    }

    fn pad(&self, x: &Tensor) -> Result<(Tensor, [usize; 3])> {
        let (_, c, dims) = ops::dims3(x.shape(), "model")?;
        if c != self.config.in_channels {
            return Err(Error::dim(
                "model",
                format!(
                    "input {:?} has {c} channels, model expects {}",
                    x.shape(),
                    self.config.in_channels
                ),
            ));
        }
        let padded = self.padded_dims(dims);
        let x = if padded == dims {
            x.clone()
        } else {
            ops::resize_volume(x, padded)?
        };
        Ok((x, dims))
    }

    pub fn features(&self, x: &Tensor, training: bool) -> Result<FeaturePyramid> {
        let (x, _) = self.pad(x)?;
        self.encoder.forward(&x, training)
    }

    /// Logits `[N, classes, D, H, W]` at the input's own extents.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (padded, dims) = self.pad(x)?;
        let pyramid = self.encoder.forward(&padded, training)?;
        let logits = self.decoder.forward(&pyramid, &padded)?;
        if padded.shape()[2..] == dims {
            Ok(logits)
        } else {
            ops::resize_volume(&logits, dims)
        }
    }

    /// Per-voxel argmax labels, computed without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = crate::tensor::no_grad(|| self.forward(x, false))?;
        Ok(argmax_channels(&logits))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }
}

/// Argmax over axis 1 of `[N, C, ...]`, flattened as `[N, ...]`.
pub fn argmax_channels(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let vol: usize = shape[2..].iter().product();
    let data = logits.data();
    let mut out = Vec::with_capacity(n * vol);
    for b in 0..n {
        for v in 0..vol {
            let mut best = 0;
            for k in 1..c {
                if data[(b * c + k) * vol + v] > data[(b * c + best) * vol + v] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}
