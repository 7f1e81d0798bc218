//! Differentiable kernels. Every function here records a tape node when
//! gradient recording is enabled and an input requires a gradient.

mod activation;
mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod pool;
mod shape;
mod softmax;

pub use activation::{gelu, gelu_scalar, prelu};
pub use conv::{conv3d, conv_transpose3d, ConvGeometry};
pub use elementwise::{add, add_indexed, mean, mul, scale, sub, sum};
pub use linalg::{bmm, bmm_nt, linear};
pub use norm::{
    batch_norm, instance_norm, layer_norm, normalize, NormMode, RunningStats, BATCH_NORM_EPS,
    BATCH_NORM_MOMENTUM, INSTANCE_NORM_EPS, LAYER_NORM_EPS,
};
pub use pool::avg_pool3d;
pub(crate) use shape::dims3;
pub use shape::{
    concat, gather, permute, permute_index, reshape, resize_volume, tokens_to_volume,
    volume_to_tokens, ZERO_FILL,
};
pub use softmax::{softmax, MASK_VALUE};
