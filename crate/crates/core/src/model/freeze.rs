use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Backbone frozen, only the projection head learns.
    HeadOnly,
    /// LoRA (+ norms) on the leading blocks, full updates on the trailing ones.
    Staged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSchedule {
    pub head_only_epochs: usize,
    /// Leading blocks adapted through LoRA.
    pub lora_layers: usize,
    /// Trailing blocks that are fully trainable.
    pub full_layers: usize,
    pub norms_trainable: bool,
}

impl Default for FreezeSchedule {
    fn default() -> Self {
        Self {
            head_only_epochs: 10,
            lora_layers: 2,
            full_layers: 2,
            norms_trainable: true,
        }
    }
}

impl FreezeSchedule {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.lora_layers + self.full_layers > depth {
            return Err(Error::Conflict {
                first: "lora_layers".into(),
                second: "full_layers".into(),
                reason: format!(
                    "{} + {} exceeds model depth {depth}",
                    self.lora_layers, self.full_layers
                ),
            });
        }
        Ok(())
    }

    pub fn lora_blocks(&self) -> Range<usize> {
        0..self.lora_layers
    }
}

/// Rule-based description of which named tensors may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    pub head: bool,
    pub embeddings: bool,
    pub final_norm: bool,
    pub lora_blocks: Range<usize>,
    pub norm_blocks: Range<usize>,
    pub full_blocks: Range<usize>,
}

fn block_index(rest: &str) -> Option<(usize, &str)> {
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail))
}

impl TrainableSet {
    pub fn none() -> Self {
        Self {
            head: false,
            embeddings: false,
            final_norm: false,
            lora_blocks: 0..0,
            norm_blocks: 0..0,
            full_blocks: 0..0,
        }
    }

    /// Every backbone and head tensor (from-scratch training).
    pub fn all(depth: usize) -> Self {
        Self {
            head: true,
            embeddings: true,
            final_norm: true,
            lora_blocks: 0..depth,
            norm_blocks: 0..depth,
            full_blocks: 0..depth,
        }
    }

    pub fn head_only() -> Self {
        Self {
            head: true,
            ..Self::none()
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        if name.starts_with("head.") {
            return self.head;
        }
        if let Some(rest) = name.strip_prefix("lora.") {
            return block_index(rest).is_some_and(|(i, _)| self.lora_blocks.contains(&i));
        }
        if let Some(rest) = name.strip_prefix("blocks.") {
            return block_index(rest).is_some_and(|(i, tail)| {
                self.full_blocks.contains(&i)
                    || ((tail.starts_with("norm1.") || tail.starts_with("norm2."))
                        && self.norm_blocks.contains(&i))
            });
        }
        if name.starts_with("norm.") {
            return self.final_norm;
        }
        if matches!(name, "cls_token" | "pos_embed") || name.starts_with("patch_embed.") {
            return self.embeddings;
        }
        false
    }

    /// Lowest block whose parameters (or whose inputs' parameters) need a
    /// gradient; `None` when the backbone is entirely frozen.
    pub fn lowest_backbone_block(&self) -> Option<usize> {
        if self.embeddings {
            return Some(0);
        }
        [&self.lora_blocks, &self.norm_blocks, &self.full_blocks]
            .into_iter()
            .filter(|r| !r.is_empty())
            .map(|r| r.start)
            .min()
    }

    pub fn any_backbone(&self) -> bool {
        self.lowest_backbone_block().is_some() || self.final_norm
    }
}

/// Phase 1: head only. Phase 2: head, LoRA factors and norms of the first
/// `lora_layers` blocks, and every tensor of the last `full_layers` blocks.
pub fn trainable_mask(schedule: &FreezeSchedule, phase: Phase, depth: usize) -> Result<TrainableSet> {
    schedule.validate(depth)?;
    Ok(match phase {
        Phase::HeadOnly => TrainableSet::head_only(),
        Phase::Staged => TrainableSet {
            head: true,
            embeddings: false,
            final_norm: false,
            lora_blocks: schedule.lora_blocks(),
            norm_blocks: if schedule.norms_trainable {
                schedule.lora_blocks()
            } else {
                0..0
            },
            full_blocks: depth - schedule.full_layers..depth,
        },
    })
}
