use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vessa_core::augment::ViewSource;
use vessa_core::config::{load_config, ExperimentConfig};
use vessa_core::data::{load_dataset, save_dataset, Domain};
use vessa_core::eval::evaluate;
use vessa_core::experiments::{self, Corpora, DeltaSpec, Preset};
use vessa_core::trainer::{load_model, save_model};

#[derive(Parser, Debug)]
#[command(name = "vessa", version, about = "Video-based self-supervised ViT adaptation on synthetic clips")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for extraction and batched forward passes.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source and target corpora as PNG frame folders.
    GenData,
    /// Self-distillation pretraining on the source domain from random init.
    Pretrain,
    /// Head warmup then staged LoRA adaptation on the target domain.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Both global views from one frame.
        #[arg(long, conflicts_with = "motion_sim")]
        static_baseline: bool,
        /// Static views plus a simulated-motion transform on the second view.
        #[arg(long)]
        motion_sim: bool,
    },
    /// k-NN accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset folder written by `gen-data`; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long)]
        k: Option<usize>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt + evaluate once per frame-distance strategy (`N` or `random[A,B]`).
    SweepDelta {
        /// Pretrained checkpoint; pretrains first when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "delta", default_values = ["1", "5", "random[5,10]"])]
        deltas: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Run a named experiment matrix and write its table.
    Reproduce {
        preset: String,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn resolve_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.out_dir.is_some() {
        cfg.out_dir = g.out_dir.clone();
    }
    if g.threads.is_some() {
        cfg.threads = g.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, sub: &str) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(sub))
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn eval_report(cfg: &ExperimentConfig, checkpoint: &Path, dataset: Option<&Path>, domain: Domain, k: usize) -> Result<vessa_core::eval::EvalReport> {
    let params = load_model(checkpoint)?;
    let clips = match dataset {
        Some(d) => load_dataset(d)?,
        None => {
            let spec = match domain {
                Domain::Source => cfg.source_spec(),
                Domain::Target => cfg.target_spec(),
            };
            vessa_core::data::generate_corpus(&spec)?
        }
    };
    let split = cfg.split(&clips, domain)?;
    Ok(evaluate(&params, None, &clips, &split, k, cfg.metric)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    init_threads(cfg.threads)?;
    match cli.command {
        Command::GenData => {
            let dir = out_dir(&cfg, "data");
            let corpora = Corpora::generate(&cfg)?;
            save_dataset(&dir.join("source"), &corpora.source)?;
            save_dataset(&dir.join("target"), &corpora.target)?;
            cfg.write_resolved(&dir)?;
            corpora.manifest().write(&dir)?;
            println!("{}", dir.display());
        }
        Command::Pretrain => {
            let dir = out_dir(&cfg, "pretrain");
            let corpora = Corpora::generate(&cfg)?;
            let pre = experiments::pretrain(&cfg, &corpora, Some(&dir))?;
            let probe = experiments::probe_unadapted(&cfg, &pre.params, &corpora)?;
            print_json(&probe)?;
        }
        Command::Adapt {
            checkpoint,
            static_baseline,
            motion_sim,
        } => {
            if static_baseline {
                cfg.view_source = ViewSource::Static;
            } else if motion_sim {
                cfg.view_source = ViewSource::StaticMotion;
            }
            let dir = out_dir(&cfg, "adapt");
            let pretrained = load_model(&checkpoint)?;
            let corpora = Corpora::generate(&cfg)?;
            let tc = cfg.train_config();
            let r = experiments::adapt_and_eval(&cfg, &tc, &pretrained, &corpora, Some(&dir))?;
            print_json(&r)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            domain,
            k,
            out,
        } => {
            let report = eval_report(&cfg, &checkpoint, dataset.as_deref(), domain.into(), k.unwrap_or(cfg.knn_k))?;
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print_json(&report)?,
            }
        }
        Command::SweepDelta {
            checkpoint,
            deltas,
            seeds,
        } => {
            let specs = deltas
                .iter()
                .map(|s| s.parse::<DeltaSpec>())
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(bad) = specs.iter().find(|s| s.bounds().1 >= cfg.frames_per_video) {
                bail!("delta {bad} does not fit clips of {} frames", cfg.frames_per_video);
            }
            let dir = out_dir(&cfg, "sweep-delta");
            let corpora = Corpora::generate(&cfg)?;
            let pretrained = match checkpoint {
                Some(p) => load_model(&p)?,
                None => {
                    let pre = experiments::pretrain(&cfg, &corpora, Some(&dir.join("pretrain")))?;
                    save_model(&pre.params, None, &dir.join(experiments::PRETRAINED_CHECKPOINT))?;
                    pre.params
                }
            };
            let table = experiments::sweep_delta(&cfg, &pretrained, &corpora, &specs, seeds, Some(&dir))?;
            table.write(&dir)?;
            print!("{}", table.to_markdown());
        }
        Command::Reproduce { preset, seeds } => {
            let preset: Preset = preset.parse()?;
            let dir = out_dir(&cfg, preset.name());
            let table = experiments::reproduce(preset, &cfg, seeds, Some(&dir))?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
