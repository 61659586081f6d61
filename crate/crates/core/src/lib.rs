//! Desk-scale text-conditioned video super-resolution with diffusion.
//!
//! An image super-resolution UNet is trained on single frames, its weights
//! are inflated into a video model that folds frames into the batch axis,
//! and temporal adapters (frame-axis self-attention) are tuned on top while
//! the backbone stays frozen.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod adapter;
pub mod autograd;
pub mod batch;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod inflation;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod store;
pub mod tuning;

pub use batch::{fold_frames, unfold_frames, ImageBatch, TextTokens, VideoBatch};
pub use error::{Error, Result};
pub use model::{ModelConfig, Stage};
pub use scalar::Scalar;
pub use store::ParameterStore;

pub type ParameterStoreF32 = ParameterStore<f32>;
pub type ParameterStoreF64 = ParameterStore<f64>;
pub type VideoBatchF32 = VideoBatch<f32>;
pub type VideoBatchF64 = VideoBatch<f64>;
pub type ImageBatchF32 = ImageBatch<f32>;
pub type ImageBatchF64 = ImageBatch<f64>;
