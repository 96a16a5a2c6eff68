//! Vision transformer backbone, DINO-style projection head, LoRA adapters and
//! the staged freeze schedule.

mod checkpoint;
mod forward;
mod freeze;
mod lora;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{backward, embed, forward, forward_from_patches, forward_recorded, patchify, Gradients, ModelOutput, Tape};
pub use freeze::{trainable_mask, FreezeSchedule, Phase, TrainableSet};
pub use lora::{inject_lora, qkv_targets, Adapters, LoraAdapter, LoraTarget, Projection};
pub use params::{Backbone, Block, Head, LayerNorm, Linear, ModelParams};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_prototypes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head: HeadConfig,
    pub layer_norm_eps: f64,
}

impl Default for ViTConfig {
    /// Desk-scale model: 64px input, 8px patches, 4 blocks of width 64.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            head: HeadConfig {
                hidden_dim: 256,
                bottleneck_dim: 64,
                num_prototypes: 256,
            },
            layer_norm_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    /// ViT-B/16 at 224px with the standard 65536-prototype head.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            head: HeadConfig {
                hidden_dim: 2048,
                bottleneck_dim: 256,
                num_prototypes: 65536,
            },
            layer_norm_eps: 1e-6,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Conflict {
                first: "image_size".into(),
                second: "patch_size".into(),
                reason: "image_size must be divisible by patch_size".into(),
            });
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Conflict {
                first: "embed_dim".into(),
                second: "num_heads".into(),
                reason: "embed_dim must be divisible by num_heads".into(),
            });
        }
        if self.depth == 0 {
            return Err(Error::field("depth", "must be >= 1"));
        }
        if self.head.num_prototypes < 2 {
            return Err(Error::field("num_prototypes", "must be >= 2"));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.head.hidden_dim == 0 || self.head.bottleneck_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}
