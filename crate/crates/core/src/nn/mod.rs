//! Parameter registry and the small set of layers the model is built from.

mod layers;
mod store;

pub use layers::{
    Affine, BatchNorm, Conv3d, ConvSpec, ConvTranspose3d, InstanceNorm, LayerNorm, Linear, PRelu,
};
pub use store::{Init, NamedTensor, ParamKind, ParamStore, VarBuilder};
