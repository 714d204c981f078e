//! Adaptive-mask RGB-D fusion segmentation network.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: tensors and layers with hand-written backward passes, the
//! two BotNet-style encoders, the adaptive-mask fusion module, the decoder,
//! metrics, the synthetic scene generator and the SGD training loop.
//! File formats, checkpoints and the command line live in the `amfnet` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod amf;
pub mod backbone;
pub mod data;
pub mod decoder;
mod error;
pub mod maskgen;
pub mod metrics;
pub mod network;
pub mod nn;
mod scalar;
pub mod tensor;
pub mod train;
pub mod types;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Shape, Tensor};
