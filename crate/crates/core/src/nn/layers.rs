use super::store::{Init, VarBuilder};
use crate::error::Result;
use crate::ops::{self, RunningStats};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &VarBuilder, din: usize, dout: usize, bias: bool) -> Self {
        let init = Init::fan_in(din);
        Linear {
            weight: vb.param("weight", &[dout, din], init),
            bias: bias.then(|| vb.param("bias", &[dout], init)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution that keeps the spatial extent (odd kernels).
    pub fn same(kernel: usize, bias: bool) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias,
        }
    }
}

impl Conv3d {
    pub fn new(vb: &VarBuilder, cin: usize, cout: usize, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        let init = Init::fan_in(cin / spec.groups * k * k * k);
        Conv3d {
            weight: vb.param("weight", &[cout, cin / spec.groups, k, k, k], init),
            bias: spec.bias.then(|| vb.param("bias", &[cout], init)),
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv3d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
}

impl ConvTranspose3d {
    pub fn new(
        vb: &VarBuilder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let init = Init::fan_in(cout * kernel.pow(3));
        ConvTranspose3d {
            weight: vb.param("weight", &[cin, cout, kernel, kernel, kernel], init),
            bias: bias.then(|| vb.param("bias", &[cout], init)),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv_transpose3d(x, &self.weight, self.bias.as_ref(), self.stride)
    }
}

/// Per-channel affine pair shared by all normalization layers.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Affine {
    fn new(vb: &VarBuilder, channels: usize) -> Self {
        Affine {
            gamma: vb.param("weight", &[channels], Init::Const(1.0)),
            beta: vb.param("bias", &[channels], Init::Const(0.0)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub affine: Affine,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &VarBuilder, channels: usize) -> Self {
        LayerNorm {
            affine: Affine::new(vb, channels),
            eps: ops::LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.affine.gamma, &self.affine.beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub affine: Affine,
    pub stats: RunningStats,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(vb: &VarBuilder, channels: usize) -> Self {
        let stats = RunningStats::new(channels);
        vb.buffer("running_mean", stats.mean.clone());
        vb.buffer("running_var", stats.var.clone());
        vb.buffer("num_batches_tracked", stats.tracked.clone());
        BatchNorm {
            affine: Affine::new(vb, channels),
            stats,
            eps: ops::BATCH_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        ops::batch_norm(
            x,
            &self.affine.gamma,
            &self.affine.beta,
            self.eps,
            &self.stats,
            training,
        )
    }

    /// Running statistics that make eval-mode BN the exact identity
    /// (with unit gamma and zero beta): mean 0, variance `1 − eps`.
    pub fn set_eval_identity(&self) -> Result<()> {
        let c = self.affine.gamma.numel();
        self.stats.set(&vec![0.0; c], &vec![1.0 - self.eps; c])?;
        self.affine.gamma.set_data(&vec![1.0; c])?;
        self.affine.beta.set_data(&vec![0.0; c])
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub affine: Affine,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(vb: &VarBuilder, channels: usize) -> Self {
        InstanceNorm {
            affine: Affine::new(vb, channels),
            eps: ops::INSTANCE_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::instance_norm(x, &self.affine.gamma, &self.affine.beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: Tensor,
}

impl PRelu {
    pub fn new(vb: &VarBuilder, channels: usize) -> Self {
        PRelu {
            slope: vb.param("weight", &[channels], Init::Const(0.25)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::prelu(x, &self.slope)
    }
}
