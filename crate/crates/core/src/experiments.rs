//! Experiment driver: corpus construction, source pretraining, adaptation arms,
//! the frame-distance sweep and the named presets that tabulate them.
//!
//! Every run directory holds the resolved config, the metrics log, the
//! checkpoints and a hash manifest of the input clips.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::ViewSource;
use crate::config::{DataManifest, ExperimentConfig};
use crate::data::{generate_corpus, DatasetSplit, Domain, VideoClip};
use crate::eval::{evaluate, forgetting_probe, ForgettingResult, SplitRef};
use crate::model::ModelParams;
use crate::seed;
use crate::trainer::{pretrain_source, run_pipeline, save_model, StepMetrics, TrainConfig};
use crate::{Error, Result};

pub const PRETRAINED_CHECKPOINT: &str = "pretrained.ckpt";
pub const RESULT_JSON: &str = "result.json";
pub const TABLE_JSON: &str = "table.json";
pub const TABLE_MARKDOWN: &str = "table.md";

/// Source and target corpora with their train/test splits.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub source: Vec<VideoClip>,
    pub source_split: DatasetSplit,
    pub target: Vec<VideoClip>,
    pub target_split: DatasetSplit,
}

impl Corpora {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let source = generate_corpus(&cfg.source_spec())?;
        let target = generate_corpus(&cfg.target_spec())?;
        let source_split = cfg.split(&source, Domain::Source)?;
        let target_split = cfg.split(&target, Domain::Target)?;
        Ok(Self {
            source,
            source_split,
            target,
            target_split,
        })
    }

    pub fn source_ref(&self) -> SplitRef<'_> {
        SplitRef {
            clips: &self.source,
            split: &self.source_split,
        }
    }

    pub fn target_ref(&self) -> SplitRef<'_> {
        SplitRef {
            clips: &self.target,
            split: &self.target_split,
        }
    }

    pub fn manifest(&self) -> DataManifest {
        let mut m = DataManifest::new();
        m.add("source", &self.source);
        m.add("target", &self.target);
        m
    }
}

fn prepare_run_dir(dir: &Path, cfg: &ExperimentConfig, corpora: &Corpora) -> Result<()> {
    cfg.write_resolved(dir)?;
    corpora.manifest().write(dir)?;
    Ok(())
}

pub struct Pretrained {
    pub params: ModelParams<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Source-domain pretraining from random init. The student weights are also
/// written as a dense model checkpoint when `out_dir` is given.
pub fn pretrain(cfg: &ExperimentConfig, corpora: &Corpora, out_dir: Option<&Path>) -> Result<Pretrained> {
    if let Some(dir) = out_dir {
        prepare_run_dir(dir, cfg, corpora)?;
    }
    let train = corpora.source_split.train_owned(&corpora.source);
    let out = pretrain_source(&cfg.pretrain_config(), &train, out_dir)?;
    if let Some(dir) = out_dir {
        save_model(&out.state.params, None, &dir.join(PRETRAINED_CHECKPOINT))?;
    }
    Ok(Pretrained {
        params: out.state.params,
        metrics: out.metrics,
    })
}

/// Result of one adaptation arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

/// Adaptation config for repetition `rep`; repetition 0 is the config's own seed.
pub fn repetition_config(cfg: &ExperimentConfig, rep: u64) -> TrainConfig {
    let mut tc = cfg.train_config();
    if rep > 0 {
        tc.seed = seed::derive(tc.seed, &[rep]);
    }
    tc
}

/// Adapts `pretrained` on the target train split and probes both domains.
pub fn adapt_and_eval(cfg: &ExperimentConfig, tc: &TrainConfig, pretrained: &ModelParams<f32>, corpora: &Corpora, out_dir: Option<&Path>) -> Result<ArmResult> {
    if let Some(dir) = out_dir {
        prepare_run_dir(dir, cfg, corpora)?;
    }
    let train = corpora.target_split.train_owned(&corpora.target);
    let out = run_pipeline(tc, pretrained, &train, out_dir)?;
    let probe = forgetting_probe(
        &out.state.params,
        Some(&out.state.adapters),
        corpora.source_ref(),
        corpora.target_ref(),
        cfg.knn_k,
        cfg.metric,
    )?;
    let result = ArmResult {
        seed: tc.seed,
        source_accuracy: probe.source_accuracy,
        target_accuracy: probe.target_accuracy,
        steps: out.state.step,
        final_loss: out.metrics.last().map(|m| m.loss),
    };
    if let Some(dir) = out_dir {
        let path = dir.join(RESULT_JSON);
        std::fs::write(&path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

pub fn probe_unadapted(cfg: &ExperimentConfig, params: &ModelParams<f32>, corpora: &Corpora) -> Result<ForgettingResult> {
    forgetting_probe(params, None, corpora.source_ref(), corpora.target_ref(), cfg.knn_k, cfg.metric)
}

/// Frame-distance strategy for the sweep: a fixed gap or a uniform range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaSpec {
    Fixed(usize),
    Random { min: usize, max: usize },
}

impl DeltaSpec {
    pub fn bounds(self) -> (usize, usize) {
        match self {
            DeltaSpec::Fixed(d) => (d, d),
            DeltaSpec::Random { min, max } => (min, max),
        }
    }
}

impl fmt::Display for DeltaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaSpec::Fixed(d) => write!(f, "{d}"),
            DeltaSpec::Random { min, max } => write!(f, "random[{min},{max}]"),
        }
    }
}

/// Accepts `5` or `random[5,10]`.
impl FromStr for DeltaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::field("delta", format!("cannot parse `{s}` (expected `N` or `random[A,B]`)"));
        let spec = if let Some(inner) = s.strip_prefix("random[").and_then(|r| r.strip_suffix(']')) {
            let (a, b) = inner.split_once(',').ok_or_else(bad)?;
            DeltaSpec::Random {
                min: a.trim().parse().map_err(|_| bad())?,
                max: b.trim().parse().map_err(|_| bad())?,
            }
        } else {
            DeltaSpec::Fixed(s.parse().map_err(|_| bad())?)
        };
        let (lo, hi) = spec.bounds();
        if lo < 1 || lo > hi {
            return Err(Error::field("delta", format!("`{s}` needs 1 <= min <= max")));
        }
        Ok(spec)
    }
}

pub fn default_delta_specs() -> Vec<DeltaSpec> {
    vec![DeltaSpec::Fixed(1), DeltaSpec::Fixed(5), DeltaSpec::Random { min: 5, max: 10 }]
}

/// One table row: per-seed results and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub runs: Vec<ArmResult>,
    pub mean_source_accuracy: f64,
    pub mean_target_accuracy: f64,
}

impl TableRow {
    pub fn new(label: impl Into<String>, runs: Vec<ArmResult>) -> Self {
        let n = runs.len().max(1) as f64;
        Self {
            label: label.into(),
            mean_source_accuracy: runs.iter().map(|r| r.source_accuracy).sum::<f64>() / n,
            mean_target_accuracy: runs.iter().map(|r| r.target_accuracy).sum::<f64>() / n,
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub name: String,
    pub rows: Vec<TableRow>,
}

impl ExperimentTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {}\n\n| row | target k-NN | source k-NN | seeds |\n|---|---|---|---|\n", self.name);
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {} |\n",
                r.label,
                100.0 * r.mean_target_accuracy,
                100.0 * r.mean_source_accuracy,
                r.runs.len()
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(TABLE_JSON);
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let md = dir.join(TABLE_MARKDOWN);
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        Ok(json)
    }
}

fn arm_dir(out_dir: Option<&Path>, label: &str, rep: u64) -> Option<PathBuf> {
    let slug: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    out_dir.map(|d| d.join(slug).join(format!("seed-{rep}")))
}

/// Runs one adaptation arm over `reps` seeds.
pub fn run_arm(label: &str, cfg: &ExperimentConfig, pretrained: &ModelParams<f32>, corpora: &Corpora, reps: u64, out_dir: Option<&Path>) -> Result<TableRow> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for rep in 0..reps {
        let tc = repetition_config(cfg, rep);
        let dir = arm_dir(out_dir, label, rep);
        let r = adapt_and_eval(cfg, &tc, pretrained, corpora, dir.as_deref())?;
        log::info!("{label} seed {rep}: target {:.4} source {:.4}", r.target_accuracy, r.source_accuracy);
        runs.push(r);
    }
    Ok(TableRow::new(label, runs))
}

fn unadapted_row(label: &str, cfg: &ExperimentConfig, params: &ModelParams<f32>, corpora: &Corpora) -> Result<TableRow> {
    let p = probe_unadapted(cfg, params, corpora)?;
    Ok(TableRow::new(
        label,
        vec![ArmResult {
            seed: cfg.seed,
            source_accuracy: p.source_accuracy,
            target_accuracy: p.target_accuracy,
            steps: 0,
            final_loss: None,
        }],
    ))
}

/// Full adapt + eval per frame-distance strategy.
pub fn sweep_delta(cfg: &ExperimentConfig, pretrained: &ModelParams<f32>, corpora: &Corpora, specs: &[DeltaSpec], reps: u64, out_dir: Option<&Path>) -> Result<ExperimentTable> {
    let mut rows = Vec::new();
    for &spec in specs {
        let (lo, hi) = spec.bounds();
        let arm = ExperimentConfig {
            delta_min: lo,
            delta_max: hi,
            view_source: ViewSource::Video,
            ..cfg.clone()
        };
        let label = format!("delta {spec}");
        rows.push(run_arm(&label, &arm, pretrained, corpora, reps, out_dir)?);
    }
    Ok(ExperimentTable {
        name: "frame distance".into(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    AblationTable1,
    BaselinesTable3,
    DeltaSweepTable2,
    ForgettingTable6,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::AblationTable1,
        Preset::BaselinesTable3,
        Preset::DeltaSweepTable2,
        Preset::ForgettingTable6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::AblationTable1 => "ablation-table1",
            Preset::BaselinesTable3 => "baselines-table3",
            Preset::DeltaSweepTable2 => "delta-sweep-table2",
            Preset::ForgettingTable6 => "forgetting-table6",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const ROW_PRETRAINED: &str = "Pretrained";
pub const ROW_STATIC: &str = "Static-baseline";
pub const ROW_VESSA: &str = "VESSA";

/// Single-factor variants of the full recipe.
pub fn ablation_arms(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let base = ExperimentConfig {
        view_source: ViewSource::Video,
        ..cfg.clone()
    };
    let mut arms = vec![
        ("full".to_string(), base.clone()),
        ("without UWSD".to_string(), ExperimentConfig { gamma: 0.0, ..base.clone() }),
        ("without local crops".to_string(), ExperimentConfig { num_local_pairs: 0, ..base.clone() }),
        ("without train head".to_string(), ExperimentConfig { head_only_epochs: 0, ..base.clone() }),
    ];
    for last in 1..=base.depth {
        arms.push((
            format!("unfrozen last {last}"),
            ExperimentConfig {
                full_layers: last,
                lora_layers: base.lora_layers.min(base.depth - last),
                ..base.clone()
            },
        ));
    }
    arms.push(("image".to_string(), ExperimentConfig { view_source: ViewSource::Static, ..base }));
    arms
}

/// Pretrains once, then runs the preset's arms for `reps` seeds each.
/// Writes `table.json` / `table.md` under `out_dir`.
pub fn reproduce(preset: Preset, cfg: &ExperimentConfig, reps: u64, out_dir: Option<&Path>) -> Result<ExperimentTable> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::field("seeds", "must be >= 1"));
    }
    let corpora = Corpora::generate(cfg)?;
    let pre = pretrain(cfg, &corpora, out_dir.map(|d| d.join("pretrain")).as_deref())?;
    let p = &pre.params;
    let table = match preset {
        Preset::AblationTable1 => {
            let mut rows = Vec::new();
            for (label, arm) in ablation_arms(cfg) {
                rows.push(run_arm(&label, &arm, p, &corpora, reps, out_dir)?);
            }
            ExperimentTable {
                name: preset.name().into(),
                rows,
            }
        }
        Preset::BaselinesTable3 | Preset::ForgettingTable6 => {
            let mut rows = vec![unadapted_row(ROW_PRETRAINED, cfg, p, &corpora)?];
            if preset == Preset::BaselinesTable3 {
                let stat = ExperimentConfig {
                    view_source: ViewSource::Static,
                    ..cfg.clone()
                };
                rows.push(run_arm(ROW_STATIC, &stat, p, &corpora, reps, out_dir)?);
            }
            let vessa = ExperimentConfig {
                view_source: ViewSource::Video,
                ..cfg.clone()
            };
            rows.push(run_arm(ROW_VESSA, &vessa, p, &corpora, reps, out_dir)?);
            ExperimentTable {
                name: preset.name().into(),
                rows,
            }
        }
        Preset::DeltaSweepTable2 => {
            let mut t = sweep_delta(cfg, p, &corpora, &default_delta_specs(), reps, out_dir)?;
            t.name = preset.name().into();
            t
        }
    };
    if let Some(dir) = out_dir {
        table.write(dir)?;
    }
    Ok(table)
}

/// k-NN accuracy of a dense model on one domain of the generated corpora.
pub fn evaluate_domain(cfg: &ExperimentConfig, params: &ModelParams<f32>, corpora: &Corpora, domain: Domain) -> Result<f64> {
    let (clips, split) = match domain {
        Domain::Source => (&corpora.source, &corpora.source_split),
        Domain::Target => (&corpora.target, &corpora.target_split),
    };
    Ok(evaluate(params, None, clips, split, cfg.knn_k, cfg.metric)?.accuracy)
}
