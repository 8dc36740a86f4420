//! Any-modality RGB-X tracking on a toy one-stream transformer.
//!
//! The crate implements edge-guided low-rank shared embeddings for auxiliary
//! modalities (depth, thermal, event), token-shrinkage modal prompting, and
//! LoRA adapters on a frozen backbone, plus the synthetic benchmark, training
//! loop and metrics needed to exercise them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the default 64-bit instantiation.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod edge;
pub mod error;
pub mod harness;
pub mod lora;
pub mod modality;
pub mod prompt;
pub mod scalar;
pub mod shared_embed;
pub mod synth;

pub use autodiff::{LinearLayer, Parameters, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use modality::Modality;
pub use scalar::Scalar;

pub type TensorF64 = autodiff::Tensor<f64>;
pub type TensorF32 = autodiff::Tensor<f32>;
pub type LinearF64 = autodiff::LinearLayer<f64>;
pub type SharedEmbedF64 = shared_embed::SharedEmbedBlock<f64>;
pub type PromptBlockF64 = prompt::PromptBlock<f64>;
pub type LoraLinearF64 = lora::LoraLinear<f64>;
pub type UnTrackF64 = backbone::UnTrack<f64>;
pub type UnTrackF32 = backbone::UnTrack<f32>;

#[cfg(test)]
pub(crate) mod test_util;
