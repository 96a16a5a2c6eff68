//! Two-phase adaptation: head-only warmup, then staged unfreezing with LoRA,
//! driven by the UWSD loss against an EMA teacher.

mod optim;
mod pipeline;

pub use optim::{AdamW, LrSchedule, Moments, OptimConfig};
pub use pipeline::{
    init_state, load_model, load_state, pretrain_source, resume_pipeline, run_pipeline, save_model, save_state, PipelineOutput,
    PretrainConfig, FINAL_CHECKPOINT, METRICS_FILE, PHASE_CHECKPOINT,
};

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentedBatch, ViewSource};
use crate::distill::{uwsd_loss, Assignment, LossConfig, TeacherState};
use crate::model::{backward, forward, forward_recorded, Adapters, FreezeSchedule, Gradients, ModelParams, Phase, Tape, TrainableSet};
use crate::sampler::SamplerConfig;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: FreezeSchedule,
    pub full_epochs: usize,
    pub lora_rank: usize,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub view_source: ViewSource,
    /// Replace the checkpoint's projection head with a fresh random one.
    pub reinit_head: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: FreezeSchedule::default(),
            full_epochs: 10,
            lora_rank: 4,
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            view_source: ViewSource::Video,
            reinit_head: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        self.schedule.validate(depth)?;
        if self.full_epochs < 1 {
            return Err(Error::field("full_epochs", "must be >= 1"));
        }
        if self.lora_rank < 1 && self.schedule.lora_layers > 0 {
            return Err(Error::field("lora_rank", "must be >= 1"));
        }
        self.sampler.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.head_only_epochs + self.full_epochs
    }

    pub fn phase_of_epoch(&self, epoch: usize) -> Phase {
        if epoch < self.schedule.head_only_epochs {
            Phase::HeadOnly
        } else {
            Phase::Staged
        }
    }
}

/// Everything needed to continue training bit-identically. Sampling and
/// augmentation streams are derived from `(seed, epoch, batch)`, so the
/// counters are the RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adapters: Adapters<f32>,
    pub teacher: TeacherState<f32>,
    pub optimizer: AdamW,
    pub phase: Phase,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub mean_entropy: f64,
    pub mean_weight: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Per-step inputs that vary with the phase.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub trainable: &'a TrainableSet,
    pub lr: f64,
    pub loss: &'a LossConfig,
    pub optim: &'a OptimConfig,
    pub phase_label: &'a str,
    pub batch_index: usize,
}

fn stack_views(batch: &AugmentedBatch, symmetric: bool) -> Vec<Vec<Image>> {
    let mut views = vec![batch.pairs.iter().map(|p| p.global_a.clone()).collect::<Vec<_>>()];
    if symmetric {
        views.push(batch.pairs.iter().map(|p| p.global_b.clone()).collect());
    }
    for i in 0..batch.num_local_pairs() {
        views.push(batch.pairs.iter().map(|p| p.locals[i].0.clone()).collect());
        views.push(batch.pairs.iter().map(|p| p.locals[i].1.clone()).collect());
    }
    views
}

/// One optimisation step: teacher targets from the second global view (and the
/// first when views are symmetric), UWSD over every student view, an AdamW
/// update of the trainable set, then the center and EMA updates.
pub fn train_step(state: &mut TrainState, batch: &AugmentedBatch, ctx: &StepContext<'_>) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let symmetric = ctx.loss.symmetric_views;
    let globals_b: Vec<Image> = batch.pairs.iter().map(|p| p.global_b.clone()).collect();
    let mut teacher_logits = vec![forward(&state.teacher.params, None, &globals_b)?.logits];
    let views = stack_views(batch, symmetric);
    if symmetric {
        teacher_logits.push(forward(&state.teacher.params, None, &views[0])?.logits);
    }
    let q: Vec<Array2<f32>> = teacher_logits.iter().map(|l| state.teacher.probs(l)).collect::<Result<_>>()?;

    let adapters = (!state.adapters.is_empty()).then_some(&state.adapters);
    let params = &state.params;
    let recorded: Vec<(Array2<f32>, Tape<f32>)> = views
        .par_iter()
        .map(|imgs| {
            let mut tape = Tape::new();
            let out = forward_recorded(params, adapters, imgs, &mut tape)?;
            Ok((out.logits, tape))
        })
        .collect::<Result<_>>()?;
    let (students, tapes): (Vec<_>, Vec<_>) = recorded.into_iter().unzip();

    let first_local = if symmetric { 2 } else { 1 };
    let locals: Vec<usize> = (first_local..students.len()).collect();
    let mut assignments = vec![Assignment {
        teacher: q[0].view(),
        student_views: std::iter::once(0).chain(locals.iter().copied()).collect(),
    }];
    if symmetric {
        assignments.push(Assignment {
            teacher: q[1].view(),
            student_views: std::iter::once(1).chain(locals.iter().copied()).collect(),
        });
    }
    let out = match uwsd_loss(&assignments, &students, ctx.loss.gamma, ctx.loss.student_temp) {
        Ok(o) => o,
        Err(Error::Numeric(detail)) => {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                batch_index: ctx.batch_index,
                detail,
            })
        }
        Err(e) => return Err(e),
    };

    let per_view: Vec<Gradients<f32>> = tapes
        .into_par_iter()
        .zip(out.grads.par_iter())
        .map(|(mut tape, g)| backward(params, adapters, &mut tape, g, None, ctx.trainable))
        .collect::<Result<_>>()?;
    let mut grads = Gradients::default();
    for g in per_view {
        grads.accumulate(g);
    }
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch_index: ctx.batch_index,
            detail: "non-finite gradient norm".into(),
        });
    }
    if let Some(clip) = ctx.optim.grad_clip {
        let clip = clip as f32;
        if grad_norm > clip {
            grads.scale(clip / (grad_norm + 1e-6));
        }
    }
    state.optimizer.step(&mut state.params, &mut state.adapters, &grads, ctx.lr, ctx.optim);

    let all_teacher = if teacher_logits.len() == 1 {
        teacher_logits.pop().expect("one")
    } else {
        concatenate(Axis(0), &teacher_logits.iter().map(|l| l.view()).collect::<Vec<_>>()).expect("same width")
    };
    state.teacher.update_center(&all_teacher)?;
    let adapters = (!state.adapters.is_empty()).then_some(&state.adapters);
    state.teacher.update_params(&state.params, adapters)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        phase: ctx.phase_label.to_string(),
        loss: f64::from(out.loss),
        mean_entropy: f64::from(out.entropies.mean().unwrap_or(0.0)),
        mean_weight: f64::from(out.weights.mean().unwrap_or(1.0)),
        grad_norm: f64::from(grad_norm),
        lr: ctx.lr,
    })
}

pub fn phase_label(phase: Phase) -> &'static str {
    match phase {
        Phase::HeadOnly => "head_only",
        Phase::Staged => "staged",
    }
}
