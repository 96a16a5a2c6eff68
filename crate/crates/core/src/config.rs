//! Flat experiment configuration: one JSON object whose keys cover data,
//! sampling, augmentation, model, schedule, loss, optimiser and evaluation.
//!
//! Unknown keys are rejected and every omitted key takes its default, so the
//! resolved config written next to each run fully describes it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewSource};
use crate::data::{split_dataset, DatasetSplit, Domain, SynthSpec, VideoClip};
use crate::distill::LossConfig;
use crate::eval::Metric;
use crate::model::{FreezeSchedule, HeadConfig, ViTConfig};
use crate::sampler::SamplerConfig;
use crate::seed;
use crate::trainer::{OptimConfig, PretrainConfig, TrainConfig};
use crate::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const DATA_MANIFEST_FILE: &str = "data_manifest.json";

const STREAM_SOURCE: u64 = 11;
const STREAM_TARGET: u64 = 12;
const STREAM_SPLIT: u64 = 13;
const STREAM_PRETRAIN: u64 = 14;
const STREAM_ADAPT: u64 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,

    // data
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub split_ratio: f64,

    // sampler
    pub delta_min: usize,
    pub delta_max: usize,
    pub pairs_per_video: usize,
    pub batch_size: usize,

    // augmentation
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub global_size: usize,
    pub local_size: usize,
    pub num_local_pairs: usize,
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub view1_blur_prob: f64,
    pub view2_blur_prob: f64,
    pub local_blur_prob: f64,
    pub solarize_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_threshold: f32,
    pub view_source: ViewSource,

    // model
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_prototypes: usize,

    // schedule
    pub head_only_epochs: usize,
    pub full_epochs: usize,
    pub lora_layers: usize,
    pub full_layers: usize,
    pub lora_rank: usize,
    pub norms_trainable: bool,
    pub reinit_head: bool,

    // loss
    pub gamma: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub symmetric_views: bool,

    // optimiser
    pub lr_head_only: f64,
    pub lr_staged: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,

    // source pretraining
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_teacher_temp: f64,
    pub pretrain_ema_momentum: f64,
    pub pretrain_num_local_pairs: usize,

    // evaluation
    pub knn_k: usize,
    pub metric: Metric,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let sampler = SamplerConfig::default();
        let aug = AugmentConfig::default();
        let model = ViTConfig::default();
        let schedule = FreezeSchedule::default();
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let optim = OptimConfig::default();
        let pre = PretrainConfig::default();
        Self {
            seed: 0,
            out_dir: None,
            threads: None,
            num_classes: synth.num_classes,
            videos_per_class: synth.videos_per_class,
            frames_per_video: synth.frames_per_video,
            image_size: synth.image_size,
            split_ratio: 0.75,
            delta_min: sampler.delta_min,
            delta_max: sampler.delta_max,
            pairs_per_video: sampler.pairs_per_video,
            batch_size: sampler.batch_size,
            global_scale: aug.global_scale,
            local_scale: aug.local_scale,
            global_size: aug.global_size,
            local_size: aug.local_size,
            num_local_pairs: aug.num_local_pairs,
            flip_prob: aug.flip_prob,
            jitter_strength: aug.jitter_strength,
            brightness: aug.brightness,
            contrast: aug.contrast,
            saturation: aug.saturation,
            hue: aug.hue,
            grayscale_prob: aug.grayscale_prob,
            view1_blur_prob: aug.view1_blur_prob,
            view2_blur_prob: aug.view2_blur_prob,
            local_blur_prob: aug.local_blur_prob,
            solarize_prob: aug.solarize_prob,
            blur_sigma: aug.blur_sigma,
            solarize_threshold: aug.solarize_threshold,
            view_source: train.view_source,
            patch_size: model.patch_size,
            embed_dim: model.embed_dim,
            depth: model.depth,
            num_heads: model.num_heads,
            mlp_ratio: model.mlp_ratio,
            head_hidden_dim: model.head.hidden_dim,
            bottleneck_dim: model.head.bottleneck_dim,
            num_prototypes: model.head.num_prototypes,
            head_only_epochs: schedule.head_only_epochs,
            full_epochs: train.full_epochs,
            lora_layers: schedule.lora_layers,
            full_layers: schedule.full_layers,
            lora_rank: train.lora_rank,
            norms_trainable: schedule.norms_trainable,
            reinit_head: train.reinit_head,
            gamma: loss.gamma,
            student_temp: loss.student_temp,
            teacher_temp: loss.teacher_temp,
            center_momentum: loss.center_momentum,
            ema_momentum: loss.ema_momentum,
            symmetric_views: loss.symmetric_views,
            lr_head_only: optim.lr_head_only,
            lr_staged: optim.lr_staged,
            min_lr: optim.min_lr,
            warmup_fraction: optim.warmup_fraction,
            weight_decay: optim.weight_decay,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            grad_clip: optim.grad_clip,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_teacher_temp: pre.loss.teacher_temp,
            pretrain_ema_momentum: pre.loss.ema_momentum,
            pretrain_num_local_pairs: pre.augment.num_local_pairs,
            knn_k: 1,
            metric: Metric::Euclidean,
        }
    }
}

fn conflict(first: &str, second: &str, reason: impl Into<String>) -> Error {
    Error::Conflict {
        first: first.into(),
        second: second.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are an error.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.source_spec().validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::field("split_ratio", "must be in (0, 1)"));
        }
        self.sampler().validate()?;
        if self.delta_max >= self.frames_per_video {
            return Err(conflict(
                "delta_max",
                "frames_per_video",
                format!(
                    "delta_max {} must be below the clip length {}",
                    self.delta_max, self.frames_per_video
                ),
            ));
        }
        self.augment().validate()?;
        self.model().validate()?;
        if self.local_size % self.patch_size != 0 {
            return Err(conflict("local_size", "patch_size", "local_size must be divisible by patch_size"));
        }
        if self.global_size > self.image_size {
            return Err(conflict("global_size", "image_size", "global views cannot exceed the frame size"));
        }
        self.train_config().validate(self.depth)?;
        self.pretrain_config().validate()?;
        if self.knn_k == 0 {
            return Err(Error::field("knn_k", "must be >= 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::field("threads", "must be >= 1"));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            videos_per_class: self.videos_per_class,
            frames_per_video: self.frames_per_video,
            image_size: self.image_size,
            domain: Domain::Source,
            seed: seed::derive(self.seed, &[STREAM_SOURCE]),
        }
    }

    pub fn target_spec(&self) -> SynthSpec {
        SynthSpec {
            domain: Domain::Target,
            seed: seed::derive(self.seed, &[STREAM_TARGET]),
            ..self.source_spec()
        }
    }

    pub fn split(&self, clips: &[VideoClip], domain: Domain) -> Result<DatasetSplit> {
        split_dataset(clips, self.split_ratio, seed::derive(self.seed, &[STREAM_SPLIT, domain_code(domain)]))
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            delta_min: self.delta_min,
            delta_max: self.delta_max,
            pairs_per_video: self.pairs_per_video,
            batch_size: self.batch_size,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            global_scale: self.global_scale,
            local_scale: self.local_scale,
            global_size: self.global_size,
            local_size: self.local_size,
            num_local_pairs: self.num_local_pairs,
            flip_prob: self.flip_prob,
            jitter_strength: self.jitter_strength,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            hue: self.hue,
            grayscale_prob: self.grayscale_prob,
            view1_blur_prob: self.view1_blur_prob,
            view2_blur_prob: self.view2_blur_prob,
            local_blur_prob: self.local_blur_prob,
            solarize_prob: self.solarize_prob,
            blur_sigma: self.blur_sigma,
            solarize_threshold: self.solarize_threshold,
        }
    }

    pub fn model(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.global_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            head: HeadConfig {
                hidden_dim: self.head_hidden_dim,
                bottleneck_dim: self.bottleneck_dim,
                num_prototypes: self.num_prototypes,
            },
            ..ViTConfig::default()
        }
    }

    pub fn schedule(&self) -> FreezeSchedule {
        FreezeSchedule {
            head_only_epochs: self.head_only_epochs,
            lora_layers: self.lora_layers,
            full_layers: self.full_layers,
            norms_trainable: self.norms_trainable,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            student_temp: self.student_temp,
            teacher_temp: self.teacher_temp,
            center_momentum: self.center_momentum,
            ema_momentum: self.ema_momentum,
            symmetric_views: self.symmetric_views,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr_head_only: self.lr_head_only,
            lr_staged: self.lr_staged,
            min_lr: self.min_lr,
            warmup_fraction: self.warmup_fraction,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
        }
    }

    /// Adaptation config; the seed is derived from the top-level seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule(),
            full_epochs: self.full_epochs,
            lora_rank: self.lora_rank,
            sampler: self.sampler(),
            augment: self.augment(),
            loss: self.loss(),
            optim: self.optim(),
            view_source: self.view_source,
            reinit_head: self.reinit_head,
            seed: seed::derive(self.seed, &[STREAM_ADAPT]),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let base = PretrainConfig::default();
        PretrainConfig {
            model: self.model(),
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            sampler: self.sampler(),
            augment: AugmentConfig {
                num_local_pairs: self.pretrain_num_local_pairs,
                ..self.augment()
            },
            loss: LossConfig {
                teacher_temp: self.pretrain_teacher_temp,
                ema_momentum: self.pretrain_ema_momentum,
                student_temp: self.student_temp,
                center_momentum: self.center_momentum,
                ..base.loss
            },
            optim: OptimConfig {
                weight_decay: self.weight_decay,
                ..base.optim
            },
            view_source: base.view_source,
            seed: seed::derive(self.seed, &[STREAM_PRETRAIN]),
        }
    }

    /// Writes the resolved config to `dir/config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn domain_code(d: Domain) -> u64 {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Reads, validates and default-fills a JSON config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json_str(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifestEntry {
    pub video_id: String,
    pub class_id: usize,
    pub frames: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub datasets: Vec<(String, Vec<DataManifestEntry>)>,
}

impl DataManifest {
    pub fn new() -> Self {
        Self { datasets: Vec::new() }
    }

    pub fn add(&mut self, name: &str, clips: &[VideoClip]) {
        let entries = clips
            .iter()
            .map(|c| DataManifestEntry {
                video_id: c.video_id.clone(),
                class_id: c.class_id,
                frames: c.len(),
                sha256: c.content_hash(),
            })
            .collect();
        self.datasets.push((name.to_string(), entries));
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(DATA_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl Default for DataManifest {
    fn default() -> Self {
        Self::new()
    }
}
