//! Self-supervised adaptation of a small vision transformer with object-centric
//! videos.
//!
//! The crate covers the whole desk-scale pipeline: procedural video generation,
//! temporal frame-pair sampling, paired-crop augmentation, a ViT with LoRA
//! adapters and hand-derived backward passes, uncertainty-weighted
//! self-distillation, staged fine-tuning and a k-NN evaluation harness.

pub mod augment;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod numeric;
pub mod sampler;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

/// A single RGB frame stored as `[height, width, channels]` with values in `[0, 1]`.
pub type Image = ndarray::Array3<f32>;
