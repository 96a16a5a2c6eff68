//! Temporal frame-pair sampling.
//!
//! Indices follow the 1-based convention `t ~ U{1, T - delta_max}`,
//! `delta ~ U{delta_min, delta_max}`; the start index is drawn first so every
//! offset up to `delta_max` is valid for it.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::seed::{self, Rng};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub clip_index: usize,
    pub clip: &'a VideoClip,
    /// 1-based start index.
    pub t: usize,
    pub delta: usize,
}

impl<'a> FramePair<'a> {
    pub fn frame_a(&self) -> &'a Image {
        &self.clip.frames[self.t - 1]
    }

    pub fn frame_b(&self) -> &'a Image {
        &self.clip.frames[self.t + self.delta - 1]
    }
}

#[derive(Debug, Clone)]
pub struct RawBatch<'a> {
    pub pairs: Vec<FramePair<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub delta_min: usize,
    pub delta_max: usize,
    pub pairs_per_video: usize,
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            delta_min: 1,
            delta_max: 10,
            pairs_per_video: 3,
            batch_size: 32,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_min < 1 {
            return Err(Error::field("delta_min", "must be >= 1"));
        }
        if self.delta_max < 1 {
            return Err(Error::field("delta_max", "must be >= 1"));
        }
        if self.delta_min > self.delta_max {
            return Err(Error::Conflict {
                first: "delta_min".into(),
                second: "delta_max".into(),
                reason: "delta_min must not exceed delta_max".into(),
            });
        }
        if self.pairs_per_video < 1 {
            return Err(Error::field("pairs_per_video", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::field("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn sample_pair<'a>(clip: &'a VideoClip, delta_max: usize, rng: &mut Rng) -> Result<FramePair<'a>> {
    sample_pair_ranged(clip, 1, delta_max, rng)
}

/// Offset uniform on `{delta_min, ..., delta_max}`; a fixed offset is
/// `delta_min == delta_max`.
pub fn sample_pair_ranged<'a>(
    clip: &'a VideoClip,
    delta_min: usize,
    delta_max: usize,
    rng: &mut Rng,
) -> Result<FramePair<'a>> {
    sample_indexed(0, clip, delta_min, delta_max, rng)
}

fn sample_indexed<'a>(
    clip_index: usize,
    clip: &'a VideoClip,
    delta_min: usize,
    delta_max: usize,
    rng: &mut Rng,
) -> Result<FramePair<'a>> {
    if delta_min < 1 || delta_min > delta_max {
        return Err(Error::Sampling(format!(
            "invalid offset range [{delta_min}, {delta_max}]"
        )));
    }
    let len = clip.len();
    if len <= delta_max {
        return Err(Error::Sampling(format!(
            "clip `{}` has {len} frames, too short for delta_max = {delta_max}",
            clip.video_id
        )));
    }
    let t = rng.random_range(1..=len - delta_max);
    let delta = rng.random_range(delta_min..=delta_max);
    Ok(FramePair {
        clip_index,
        clip,
        t,
        delta,
    })
}

/// Builds one epoch: every clip contributes exactly `pairs_per_video` pairs.
/// Pairs are laid out as `pairs_per_video` consecutive random permutations of the
/// clips, so a batch only repeats a video when it straddles two rounds. The
/// trailing partial batch is dropped.
pub fn build_epoch<'a>(
    clips: &'a [VideoClip],
    cfg: &SamplerConfig,
    epoch_seed: u64,
) -> Result<Vec<RawBatch<'a>>> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Sampling("no clips to sample from".into()));
    }
    if let Some(short) = clips.iter().find(|c| c.len() <= cfg.delta_max) {
        return Err(Error::Sampling(format!(
            "clip `{}` has {} frames, too short for delta_max = {}",
            short.video_id,
            short.len(),
            cfg.delta_max
        )));
    }
    let mut order = Vec::with_capacity(clips.len() * cfg.pairs_per_video);
    for round in 0..cfg.pairs_per_video {
        let mut perm: Vec<usize> = (0..clips.len()).collect();
        perm.shuffle(&mut seed::rng(epoch_seed, &[0, round as u64]));
        order.extend(perm.into_iter().map(|c| (c, round)));
    }
    let n_batches = order.len() / cfg.batch_size;
    order.truncate(n_batches * cfg.batch_size);
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let pairs = chunk
                .iter()
                .map(|&(c, k)| {
                    let mut rng = seed::rng(epoch_seed, &[1, c as u64, k as u64]);
                    sample_indexed(c, &clips[c], cfg.delta_min, cfg.delta_max, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RawBatch { pairs })
        })
        .collect()
}
