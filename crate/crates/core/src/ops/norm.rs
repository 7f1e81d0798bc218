//! Layer, batch and instance normalization sharing one kernel.
//!
//! The input is viewed as `[A, C, B]`: layer mode normalizes each of the
//! `A` rows over its `C` channels (last axis, `B = 1`); batch mode pools
//! `A × B` per channel; instance mode pools `B` per `(a, c)`. The affine
//! parameters are always per channel.

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    Layer,
    Batch,
    Instance,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Batch-norm running statistics. `tracked` counts training updates (or
/// explicit assignments); eval mode refuses to run while it is zero.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub tracked: Tensor,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            tracked: Tensor::zeros(&[1]),
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn is_populated(&self) -> bool {
        self.tracked.data()[0] > 0.0
    }

    /// Assign statistics directly and mark them populated.
    pub fn set(&self, mean: &[f64], var: &[f64]) -> Result<()> {
        self.mean.set_data(mean)?;
        self.var.set_data(var)?;
        self.tracked.update_data(|t| t[0] = t[0].max(1.0))
    }
}

#[derive(Clone, Copy)]
struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
    mode: NormMode,
}

impl Layout {
    fn of(shape: &[usize], mode: NormMode) -> Result<Self> {
        let total: usize = shape.iter().product();
        match mode {
            NormMode::Layer => {
                let c = *shape
                    .last()
                    .ok_or_else(|| Error::dim("layer_norm", "empty shape"))?;
                Ok(Layout {
                    outer: total / c,
                    channels: c,
                    inner: 1,
                    mode,
                })
            }
            NormMode::Batch | NormMode::Instance => {
                if shape.len() < 2 {
                    return Err(Error::dim(
                        "normalize",
                        format!("need N×C×…, got {shape:?}"),
                    ));
                }
                Ok(Layout {
                    outer: shape[0],
                    channels: shape[1],
                    inner: total / (shape[0] * shape[1]),
                    mode,
                })
            }
        }
    }

    fn groups(&self) -> usize {
        match self.mode {
            NormMode::Layer => self.outer,
            NormMode::Batch => self.channels,
            NormMode::Instance => self.outer * self.channels,
        }
    }

    fn group(&self, a: usize, c: usize) -> usize {
        match self.mode {
            NormMode::Layer => a,
            NormMode::Batch => c,
            NormMode::Instance => a * self.channels + c,
        }
    }

    fn group_size(&self) -> usize {
        self.outer * self.channels * self.inner / self.groups()
    }

    /// Visit every element as `(flat index, group, channel)`.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut i = 0;
        for a in 0..self.outer {
            for c in 0..self.channels {
                let g = self.group(a, c);
                for _ in 0..self.inner {
                    f(i, g, c);
                    i += 1;
                }
            }
        }
    }
}

struct NormBackward {
    layout: Layout,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Statistics came from the batch (gradient flows through them).
    batch_stats: bool,
}

impl BackwardOp for NormBackward {
    fn name(&self) -> &'static str {
        match self.layout.mode {
            NormMode::Layer => "layer_norm",
            NormMode::Batch => "batch_norm",
            NormMode::Instance => "instance_norm",
        }
    }

    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let l = self.layout;
        let gd = gamma.data();
        let gx = x.requires_grad().then(|| {
            let mut gx = vec![0.0; grad.len()];
            if self.batch_stats {
                let groups = l.groups();
                let n = l.group_size() as f64;
                let mut mean_g = vec![0.0; groups];
                let mut mean_gx = vec![0.0; groups];
                l.for_each(|i, g, c| {
                    let v = grad[i] * gd[c];
                    mean_g[g] += v;
                    mean_gx[g] += v * self.xhat[i];
                });
                mean_g.iter_mut().for_each(|v| *v /= n);
                mean_gx.iter_mut().for_each(|v| *v /= n);
                l.for_each(|i, g, c| {
                    let v = grad[i] * gd[c];
                    gx[i] = self.inv_std[g] * (v - mean_g[g] - self.xhat[i] * mean_gx[g]);
                });
            } else {
                l.for_each(|i, g, c| gx[i] = grad[i] * gd[c] * self.inv_std[g]);
            }
            gx
        });
        let gg = gamma.requires_grad().then(|| {
            let mut gg = vec![0.0; l.channels];
            l.for_each(|i, _, c| gg[c] += grad[i] * self.xhat[i]);
            gg
        });
        let gb = beta.requires_grad().then(|| {
            let mut gb = vec![0.0; l.channels];
            l.for_each(|i, _, c| gb[c] += grad[i]);
            gb
        });
        vec![gx, gg, gb]
    }
}

/// Normalize `input` over the reduction axes of `mode`, then scale by
/// `gamma` and shift by `beta` (both `[C]`).
///
/// Batch mode needs `running`: in training it uses batch statistics and
/// updates the running estimates; otherwise it normalizes with them.
pub fn normalize(
    input: &Tensor,
    mode: NormMode,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    running: Option<&RunningStats>,
    training: bool,
) -> Result<Tensor> {
    let l = Layout::of(input.shape(), mode)?;
    gamma.ensure_shape("normalize gamma", &[l.channels])?;
    beta.ensure_shape("normalize beta", &[l.channels])?;
    let use_running = match (mode, running) {
        (NormMode::Batch, None) => {
            return Err(Error::State("batch norm needs running statistics".into()))
        }
        (NormMode::Batch, Some(stats)) if !training => {
            if !stats.is_populated() {
                return Err(Error::State(
                    "eval-mode batch norm with unpopulated running statistics".into(),
                ));
            }
            true
        }
        _ => false,
    };
    let groups = l.groups();
    let xd = input.data();
    let (mean, inv_std) = if use_running {
        let stats = running.expect("checked above");
        let m = stats.mean.to_vec();
        let inv: Vec<f64> = stats
            .var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        (m, inv)
    } else {
        let n = l.group_size() as f64;
        let mut mean = vec![0.0; groups];
        l.for_each(|i, g, _| mean[g] += xd[i]);
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; groups];
        l.for_each(|i, g, _| {
            let d = xd[i] - mean[g];
            var[g] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= n);
        if let (NormMode::Batch, Some(stats)) = (mode, running) {
            let m = stats.momentum;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            stats.mean.update_data(|rm| {
                rm.iter_mut()
                    .zip(&mean)
                    .for_each(|(r, b)| *r = (1.0 - m) * *r + m * b)
            })?;
            stats.var.update_data(|rv| {
                rv.iter_mut()
                    .zip(&var)
                    .for_each(|(r, b)| *r = (1.0 - m) * *r + m * b * unbias)
            })?;
            stats.tracked.update_data(|t| t[0] += 1.0)?;
        }
        let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        (mean, inv)
    };
    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    l.for_each(|i, g, c| {
        xhat[i] = (xd[i] - mean[g]) * inv_std[g];
        y[i] = xhat[i] * gd[c] + bd[c];
    });
    drop((xd, gd, bd));
    Tensor::from_op(
        y,
        input.shape().to_vec(),
        vec![input.clone(), gamma.clone(), beta.clone()],
        NormBackward {
            layout: l,
            xhat,
            inv_std,
            batch_stats: !use_running,
        },
    )
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    normalize(x, NormMode::Layer, gamma, beta, eps, None, true)
}

pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    stats: &RunningStats,
    training: bool,
) -> Result<Tensor> {
    normalize(x, NormMode::Batch, gamma, beta, eps, Some(stats), training)
}

pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    normalize(x, NormMode::Instance, gamma, beta, eps, None, true)
}
