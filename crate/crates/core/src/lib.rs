//! Hybrid Swin/Inception encoder with a convolutional decoder for 3D
//! volumetric segmentation, built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;

pub use config::{DecoderKind, MergeKind, ModelConfig};
pub use error::{Error, Result};
pub use model::SegmentationModel;
pub use tensor::Tensor;

/// Guide chapters, compiled and run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../README.md")]
    struct Readme;
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/windows.md")]
    struct Windows;
    #[doc = include_str!("../../../book/src/feed_forward.md")]
    struct FeedForward;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
