use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tensor};

/// Exact GELU, `x·Φ(x)` with Φ from the error function.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

struct GeluBackward;

impl BackwardOp for GeluBackward {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let xd = inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(xd.iter())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect(),
        )]
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let y = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_op(y, x.shape().to_vec(), vec![x.clone()], GeluBackward)
}

struct PreluBackward {
    channels: usize,
    inner: usize,
}

impl BackwardOp for PreluBackward {
    fn name(&self) -> &'static str {
        "prelu"
    }
    fn backward(&self, inputs: &[Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, slope) = (&inputs[0], &inputs[1]);
        let xd = x.data();
        let sd = slope.data();
        let chan = |i: usize| (i / self.inner) % self.channels;
        let gx = x.requires_grad().then(|| {
            grad.iter()
                .zip(xd.iter())
                .enumerate()
                .map(|(i, (g, &v))| if v >= 0.0 { *g } else { g * sd[chan(i)] })
                .collect()
        });
        let gs = slope.requires_grad().then(|| {
            let mut gs = vec![0.0; self.channels];
            for (i, (g, &v)) in grad.iter().zip(xd.iter()).enumerate() {
                if v < 0.0 {
                    gs[chan(i)] += g * v;
                }
            }
            gs
        });
        vec![gx, gs]
    }
}

/// Parametric ReLU with a learnable slope per channel (axis 1).
pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || slope.shape() != [x.shape()[1]] {
        return Err(Error::dim(
            "prelu",
            format!("input {:?} vs slope {:?}", x.shape(), slope.shape()),
        ));
    }
    let channels = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let y = {
        let sd = slope.data();
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 {
                    v
                } else {
                    v * sd[(i / inner) % channels]
                }
            })
            .collect()
    };
    Tensor::from_op(
        y,
        x.shape().to_vec(),
        vec![x.clone(), slope.clone()],
        PreluBackward { channels, inner },
    )
}
