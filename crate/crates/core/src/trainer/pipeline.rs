use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, Ix1};
use serde::{Deserialize, Serialize};

use super::{phase_label, train_step, AdamW, LrSchedule, Moments, OptimConfig, StepContext, StepMetrics, TrainConfig, TrainState};
use crate::augment::{augment_batch, AugmentConfig, ViewSource};
use crate::data::VideoClip;
use crate::distill::{LossConfig, TeacherState};
use crate::model::{inject_lora, qkv_targets, trainable_mask, Adapters, Checkpoint, Head, ModelParams, Phase, TrainableSet, ViTConfig};
use crate::sampler::{build_epoch, SamplerConfig};
use crate::seed;
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PHASE_CHECKPOINT: &str = "phase_boundary.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const STREAM_EPOCH: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_LORA: u64 = 4;
const STREAM_INIT: u64 = 5;

#[derive(Debug)]
pub struct PipelineOutput {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Source-domain self-distillation from random initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ViTConfig,
    pub epochs: usize,
    pub lr: f64,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub view_source: ViewSource,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            epochs: 40,
            lr: 2e-4,
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig {
                gamma: 0.0,
                symmetric_views: true,
                ema_momentum: 0.99,
                ..LossConfig::default()
            },
            optim: OptimConfig::default(),
            view_source: ViewSource::Static,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs < 1 {
            return Err(Error::field("pretrain_epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::field("pretrain_lr", "must be >= 0"));
        }
        self.sampler.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }
}

struct EpochPlan {
    label: &'static str,
    trainable: TrainableSet,
    lr: LrSchedule,
    phase_start_epoch: usize,
}

struct Loop<'a> {
    clips: &'a [VideoClip],
    sampler: &'a SamplerConfig,
    augment: &'a AugmentConfig,
    view_source: ViewSource,
    loss: &'a LossConfig,
    optim: &'a OptimConfig,
    batches_per_epoch: usize,
}

struct MetricsSink {
    writer: Option<BufWriter<File>>,
    records: Vec<StepMetrics>,
}

impl MetricsSink {
    fn open(out_dir: Option<&Path>, append: bool) -> Result<Self> {
        let writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self {
            writer,
            records: Vec::new(),
        })
    }

    fn push(&mut self, m: StepMetrics) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(&m)?;
            writeln!(w, "{line}").map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        self.records.push(m);
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<StepMetrics>> {
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(self.records)
    }
}

fn batches_per_epoch(clips: &[VideoClip], sampler: &SamplerConfig) -> Result<usize> {
    sampler.validate()?;
    if clips.is_empty() {
        return Err(Error::Sampling("training set is empty".into()));
    }
    if let Some(short) = clips.iter().find(|c| c.len() <= sampler.delta_max) {
        return Err(Error::Sampling(format!(
            "clip `{}` has {} frames, too short for delta_max = {}",
            short.video_id,
            short.len(),
            sampler.delta_max
        )));
    }
    let n = clips.len() * sampler.pairs_per_video / sampler.batch_size;
    if n == 0 {
        return Err(Error::Conflict {
            first: "batch_size".into(),
            second: "pairs_per_video".into(),
            reason: format!(
                "{} clips x {} pairs do not fill a single batch of {}",
                clips.len(),
                sampler.pairs_per_video,
                sampler.batch_size
            ),
        });
    }
    Ok(n)
}

fn run_epochs(
    state: &mut TrainState,
    lp: &Loop<'_>,
    until_epoch: usize,
    plan: impl Fn(usize) -> Result<EpochPlan>,
    sink: &mut MetricsSink,
    mut on_epoch_end: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    while state.epoch < until_epoch {
        let epoch = state.epoch;
        let p = plan(epoch)?;
        let epoch_seed = seed::derive(state.seed, &[STREAM_EPOCH, epoch as u64]);
        let batches = build_epoch(lp.clips, lp.sampler, epoch_seed)?;
        for (bi, raw) in batches.iter().enumerate() {
            let aug = augment_batch(raw, lp.augment, lp.view_source, seed::derive(epoch_seed, &[STREAM_AUGMENT, bi as u64]))?;
            let phase_step = ((epoch - p.phase_start_epoch) * lp.batches_per_epoch + bi) as u64;
            let ctx = StepContext {
                trainable: &p.trainable,
                lr: p.lr.at(phase_step),
                loss: lp.loss,
                optim: lp.optim,
                phase_label: p.label,
                batch_index: bi,
            };
            let m = train_step(state, &aug, &ctx)?;
            log::debug!("epoch {epoch} step {} loss {:.5}", m.step, m.loss);
            sink.push(m)?;
        }
        state.epoch += 1;
        on_epoch_end(state)?;
    }
    Ok(())
}

/// Fresh adaptation state from a pretrained backbone: optionally a new random
/// head, zero-effect LoRA adapters on the leading blocks, teacher = student.
pub fn init_state(cfg: &TrainConfig, pretrained: &ModelParams<f32>) -> Result<TrainState> {
    cfg.validate(pretrained.config.depth)?;
    let mut params = pretrained.clone();
    if cfg.reinit_head {
        params.head = Head::init(
            params.config.embed_dim,
            &params.config.head,
            &mut seed::rng(cfg.seed, &[STREAM_HEAD]),
        );
    }
    let adapters = if cfg.schedule.lora_layers > 0 {
        inject_lora(
            &params,
            cfg.lora_rank,
            &qkv_targets(cfg.schedule.lora_blocks()),
            &mut seed::rng(cfg.seed, &[STREAM_LORA]),
        )?
    } else {
        Adapters::empty()
    };
    let teacher = TeacherState::from_student(&params, Some(&adapters), &cfg.loss);
    Ok(TrainState {
        params,
        adapters,
        teacher,
        optimizer: AdamW::new(),
        phase: cfg.phase_of_epoch(0),
        epoch: 0,
        step: 0,
        seed: cfg.seed,
    })
}

fn adapt(cfg: &TrainConfig, mut state: TrainState, clips: &[VideoClip], out_dir: Option<&Path>, append: bool) -> Result<PipelineOutput> {
    cfg.validate(state.params.config.depth)?;
    let bpe = batches_per_epoch(clips, &cfg.sampler)?;
    let depth = state.params.config.depth;
    let head_epochs = cfg.schedule.head_only_epochs;
    let lp = Loop {
        clips,
        sampler: &cfg.sampler,
        augment: &cfg.augment,
        view_source: cfg.view_source,
        loss: &cfg.loss,
        optim: &cfg.optim,
        batches_per_epoch: bpe,
    };
    let plan = |epoch: usize| -> Result<EpochPlan> {
        let phase = cfg.phase_of_epoch(epoch);
        let (start, epochs, base) = match phase {
            Phase::HeadOnly => (0, head_epochs, cfg.optim.lr_head_only),
            Phase::Staged => (head_epochs, cfg.full_epochs, cfg.optim.lr_staged),
        };
        Ok(EpochPlan {
            label: phase_label(phase),
            trainable: trainable_mask(&cfg.schedule, phase, depth)?,
            lr: LrSchedule::new(base, cfg.optim.min_lr, cfg.optim.warmup_fraction, (epochs * bpe) as u64),
            phase_start_epoch: start,
        })
    };
    let mut sink = MetricsSink::open(out_dir, append)?;
    let meta = serde_json::to_value(cfg)?;
    run_epochs(&mut state, &lp, cfg.total_epochs(), plan, &mut sink, |s| {
        if s.epoch == head_epochs && head_epochs > 0 {
            if let Some(dir) = out_dir {
                let mut boundary = s.clone();
                boundary.phase = Phase::Staged;
                save_state(&boundary, &meta, &dir.join(PHASE_CHECKPOINT))?;
            }
        }
        Ok(())
    })?;
    state.phase = cfg.phase_of_epoch(cfg.total_epochs().saturating_sub(1));
    if let Some(dir) = out_dir {
        save_state(&state, &meta, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(PipelineOutput {
        state,
        metrics: sink.finish()?,
    })
}

/// Head-only phase followed by the staged phase. With `out_dir`, writes the
/// metrics log and checkpoints at the phase boundary and at the end.
pub fn run_pipeline(cfg: &TrainConfig, pretrained: &ModelParams<f32>, clips: &[VideoClip], out_dir: Option<&Path>) -> Result<PipelineOutput> {
    batches_per_epoch(clips, &cfg.sampler)?;
    let state = init_state(cfg, pretrained)?;
    adapt(cfg, state, clips, out_dir, false)
}

/// Continues a run from a saved state (e.g. the phase-boundary checkpoint),
/// appending to the metrics log.
pub fn resume_pipeline(cfg: &TrainConfig, state: TrainState, clips: &[VideoClip], out_dir: Option<&Path>) -> Result<PipelineOutput> {
    if state.seed != cfg.seed {
        return Err(Error::Conflict {
            first: "seed".into(),
            second: "checkpoint".into(),
            reason: format!("config seed {} differs from checkpoint seed {}", cfg.seed, state.seed),
        });
    }
    adapt(cfg, state, clips, out_dir, true)
}

/// Trains every backbone and head tensor from random initialisation.
pub fn pretrain_source(cfg: &PretrainConfig, clips: &[VideoClip], out_dir: Option<&Path>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let bpe = batches_per_epoch(clips, &cfg.sampler)?;
    let params = ModelParams::<f32>::init(cfg.model, &mut seed::rng(cfg.seed, &[STREAM_INIT]));
    let teacher = TeacherState::from_student(&params, None, &cfg.loss);
    let mut state = TrainState {
        params,
        adapters: Adapters::empty(),
        teacher,
        optimizer: AdamW::new(),
        phase: Phase::Staged,
        epoch: 0,
        step: 0,
        seed: cfg.seed,
    };
    let lp = Loop {
        clips,
        sampler: &cfg.sampler,
        augment: &cfg.augment,
        view_source: cfg.view_source,
        loss: &cfg.loss,
        optim: &cfg.optim,
        batches_per_epoch: bpe,
    };
    let depth = cfg.model.depth;
    let schedule = LrSchedule::new(cfg.lr, cfg.optim.min_lr, cfg.optim.warmup_fraction, (cfg.epochs * bpe) as u64);
    let plan = |_| {
        Ok(EpochPlan {
            label: "pretrain",
            trainable: TrainableSet::all(depth),
            lr: schedule,
            phase_start_epoch: 0,
        })
    };
    let mut sink = MetricsSink::open(out_dir, false)?;
    run_epochs(&mut state, &lp, cfg.epochs, plan, &mut sink, |_| Ok(()))?;
    if let Some(dir) = out_dir {
        save_state(&state, &serde_json::to_value(cfg)?, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(PipelineOutput {
        state,
        metrics: sink.finish()?,
    })
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    model: ViTConfig,
    phase: Phase,
    epoch: usize,
    step: u64,
    seed: u64,
    ema_momentum: f64,
    center_momentum: f64,
    teacher_temp: f64,
    student_temp: f64,
    optim_steps: BTreeMap<String, u64>,
    config: serde_json::Value,
}

/// Writes student weights, adapters (`lora.*`), teacher (`teacher.*`),
/// optimizer moments (`optim.m.*`, `optim.v.*`) and counters.
pub fn save_state(state: &TrainState, config: &serde_json::Value, path: &Path) -> Result<()> {
    let t = &state.teacher;
    let meta = StateMeta {
        kind: "train_state".into(),
        model: state.params.config,
        phase: state.phase,
        epoch: state.epoch,
        step: state.step,
        seed: state.seed,
        ema_momentum: t.ema_momentum,
        center_momentum: t.center_momentum,
        teacher_temp: t.teacher_temp,
        student_temp: t.student_temp,
        optim_steps: state.optimizer.moments.iter().map(|(k, m)| (k.clone(), m.steps)).collect(),
        config: config.clone(),
    };
    let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
    ck.extend("", state.params.named_tensors());
    ck.extend("", state.adapters.named_tensors());
    ck.extend("teacher", t.params.named_tensors());
    ck.push("teacher_center", t.center.view().into_dyn());
    for (name, m) in &state.optimizer.moments {
        ck.push(format!("optim.m.{name}"), m.m.view());
        ck.push(format!("optim.v.{name}"), m.v.view());
    }
    ck.save(path)
}

pub fn load_state(path: &Path) -> Result<(TrainState, serde_json::Value)> {
    let ck = Checkpoint::load(path)?;
    let meta: StateMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut params = ModelParams::<f32>::init(meta.model, &mut seed::rng(0, &[]));
    params.load_named(&ck.without_sections(&["lora", "teacher", "optim", "teacher_center"]).into_iter().filter(|(n, _)| n != "teacher_center").collect::<Vec<_>>())?;
    let adapters = Adapters::from_named(&ck.section("lora").into_iter().map(|(n, t)| (format!("lora.{n}"), t)).collect::<Vec<_>>())?;
    let mut teacher_params = params.zeros_like();
    teacher_params.load_named(&ck.section("teacher"))?;
    let center: Array1<f32> = ck
        .get("teacher_center")
        .ok_or_else(|| Error::Checkpoint("missing teacher_center".into()))?
        .clone()
        .into_dimensionality::<Ix1>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut moments = BTreeMap::new();
    for (name, steps) in meta.optim_steps {
        let get = |kind: &str| -> Result<ArrayD<f32>> {
            ck.get(&format!("optim.{kind}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for `{name}`")))
        };
        moments.insert(name.clone(), Moments { m: get("m")?, v: get("v")?, steps });
    }
    let state = TrainState {
        params,
        adapters,
        teacher: TeacherState {
            params: teacher_params,
            center,
            ema_momentum: meta.ema_momentum,
            center_momentum: meta.center_momentum,
            teacher_temp: meta.teacher_temp,
            student_temp: meta.student_temp,
        },
        optimizer: AdamW { moments },
        phase: meta.phase,
        epoch: meta.epoch,
        step: meta.step,
        seed: meta.seed,
    };
    Ok((state, meta.config))
}

/// Dense model-only checkpoint (adapters merged when given).
pub fn save_model(params: &ModelParams<f32>, adapters: Option<&Adapters<f32>>, path: &Path) -> Result<()> {
    let dense = match adapters {
        Some(a) => params.merged(a),
        None => params.clone(),
    };
    let mut ck = Checkpoint::new(serde_json::json!({ "kind": "model", "model": dense.config }));
    ck.extend("", dense.named_tensors());
    ck.save(path)
}

/// Loads the student weights of any checkpoint written by this crate; adapters
/// found in a training-state checkpoint are merged in.
pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.get("kind").and_then(|k| k.as_str()) == Some("train_state") {
        let (state, _) = load_state(path)?;
        return Ok(state.params.merged(&state.adapters));
    }
    let model: ViTConfig = serde_json::from_value(ck.meta.get("model").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("{}: bad model header: {e}", path.display())))?;
    let mut params = ModelParams::<f32>::init(model, &mut seed::rng(0, &[]));
    params.load_named(&ck.tensors)?;
    Ok(params)
}
