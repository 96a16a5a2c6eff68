//! Acceptance criteria, one line each. Runs without the libtest harness so
//! every criterion is evaluated and reported even when an earlier one fails.

mod common;

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vessa_core::augment::{augment_batch, ViewSource};
use vessa_core::config::ExperimentConfig;
use vessa_core::data::{Domain, VideoClip};
use vessa_core::distill::{dino_ce, entropy, log_softmax, uwsd_loss, uwsd_weight, Assignment};
use vessa_core::eval::{knn_predict, EmbeddingIndex, Metric};
use vessa_core::experiments::{self, Corpora, TableRow};
use vessa_core::model::{forward, inject_lora, qkv_targets, trainable_mask, ModelParams, Phase, TrainableSet, ViTConfig};
use vessa_core::sampler::{build_epoch, sample_pair, SamplerConfig};
use vessa_core::seed;
use vessa_core::trainer::{init_state, train_step, StepContext, TrainState, METRICS_FILE};

use common::*;

const FD_TOLERANCE: f64 = 1e-4;
const FD_BUDGET: Duration = Duration::from_secs(120);
const LORA_TOLERANCE: f32 = 1e-5;
const LORA_TRIALS: usize = 100;
const LORA_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_TOLERANCE: f64 = 1e-6;
const SIMPLEX_POINTS: usize = 100_000;
const SAMPLER_DRAWS: usize = 100_000;
const SAMPLER_FRAMES: usize = 10;
const SAMPLER_DELTA_MAX: usize = 3;
const SAMPLER_ALPHA: f64 = 0.01;
const FREEZE_STEPS: usize = 50;
const KNN_INSTANCES: usize = 20;
const KNN_MAX_POINTS: usize = 1000;
const SEEDS: u64 = 3;
const STATIC_MARGIN: f64 = 0.01;
const E2E_BUDGET: Duration = Duration::from_secs(45 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1_gradients() -> Outcome {
    let t0 = Instant::now();
    let (params, adapters) = gradcheck_model();
    let problem = UwsdProblem::new();
    let trainable = TrainableSet::all(params.config.depth);
    let grads = problem.gradients(&params, &adapters, &trainable);
    let complete = grads.len() == params.named_tensors().len() + adapters.named_tensors().len();
    let r = finite_difference_check(&params, &adapters, &grads, |p, a| problem.loss(p, a));
    let elapsed = t0.elapsed();
    outcome(
        complete && r.worst < FD_TOLERANCE && elapsed < FD_BUDGET,
        format!(
            "{} scalars over {} tensors, worst rel err {:.2e} ({}), {:.1}s",
            r.checked,
            grads.len(),
            r.worst,
            r.worst_name,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2_lora() -> Outcome {
    let t0 = Instant::now();
    let cfg = ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        ..ViTConfig::default()
    };
    let images: Vec<_> = (0..3).map(|i| random_image(16, 500 + i)).collect();
    let mut worst = 0.0f32;
    for trial in 0..LORA_TRIALS as u64 {
        let params = ModelParams::<f32>::init(cfg, &mut seed::rng(trial, &[1]));
        let rank = 1 + trial as usize % 4;
        let mut adapters = inject_lora(&params, rank, &qkv_targets(0..2), &mut seed::rng(trial, &[2])).unwrap();
        let mut rng = seed::rng(trial, &[3]);
        let n = Normal::new(0.0f32, 0.05).unwrap();
        for (_, mut t) in adapters.named_tensors_mut() {
            t.mapv_inplace(|_| n.sample(&mut rng));
        }
        let factored = forward(&params, Some(&adapters), &images).unwrap();
        let merged = forward(&params.merged(&adapters), None, &images).unwrap();
        let d = factored
            .embedding
            .iter()
            .zip(merged.embedding.iter())
            .chain(factored.logits.iter().zip(merged.logits.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        worst = worst.max(d);
    }
    let params = ModelParams::<f32>::init(ViTConfig::default(), &mut seed::rng(9, &[]));
    let zero = inject_lora(&params, 4, &qkv_targets(0..4), &mut seed::rng(10, &[])).unwrap();
    let big: Vec<_> = (0..2).map(|i| random_image(64, 600 + i)).collect();
    let base = forward(&params, None, &big).unwrap();
    let with = forward(&params, Some(&zero), &big).unwrap();
    let identical = base.logits == with.logits && base.embedding == with.embedding;
    let elapsed = t0.elapsed();
    outcome(
        worst < LORA_TOLERANCE && identical && elapsed < LORA_BUDGET,
        format!(
            "max |factored - merged| {worst:.2e} over {LORA_TRIALS} adapters, zero-init bit-identical: {identical}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3_loss_identities() -> Outcome {
    let mut rng = seed::rng(31, &[]);
    let mut worst_ce = 0.0f64;
    for _ in 0..200 {
        let s = ndarray::Array1::from_shape_simple_fn(16, || rng.random_range(-3.0..3.0));
        let q = log_softmax(s.view(), 0.1).mapv(f64::exp);
        worst_ce = worst_ce.max((dino_ce(q.view(), s.view(), 0.1) - entropy(q.view())).abs());
    }

    let q = random_simplex(8, 12, 32);
    let students: Vec<Array2<f64>> = (0..4)
        .map(|i| {
            let mut r = seed::rng(33, &[i]);
            Array2::from_shape_simple_fn((8, 12), || r.random_range(-1.0..1.0))
        })
        .collect();
    let a = [Assignment {
        teacher: q.view(),
        student_views: vec![0, 1, 2, 3],
    }];
    let weighted = uwsd_loss(&a, &students, 0.0, 0.1).unwrap().loss;
    let mut plain = 0.0;
    for i in 0..8 {
        let mut t = 0.0;
        for s in &students {
            t += dino_ce(q.row(i), s.row(i), 0.1);
        }
        plain += t / 4.0;
    }
    plain /= 8.0;
    let exact = weighted == plain;

    let k = 64;
    let pts = random_simplex(SIMPLEX_POINTS, k, 34);
    let upper = 1.0 + (k as f64).ln();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in pts.rows() {
        let w = uwsd_weight(row, 1.0);
        lo = lo.min(w);
        hi = hi.max(w);
    }
    let one_hot_is_one = uwsd_weight(ndarray::Array1::from_shape_fn(k, |j| f64::from(j == 0)).view(), 1.0) == 1.0;
    let uniform_is_max = (uwsd_weight(ndarray::Array1::from_elem(k, 1.0 / k as f64).view(), 1.0) - upper).abs() < 1e-12;
    let bounded = lo >= 1.0 && hi <= upper;
    outcome(
        worst_ce < IDENTITY_TOLERANCE && exact && bounded && one_hot_is_one && uniform_is_max,
        format!(
            "|CE(q,q) - H(q)| <= {worst_ce:.1e}; gamma=0 equals plain mean exactly: {exact}; w in [{lo:.4}, {hi:.4}] within [1, {upper:.4}] over {SIMPLEX_POINTS} points"
        ),
    )
}

fn criterion_4_sampler() -> Outcome {
    let frames: Vec<_> = (0..SAMPLER_FRAMES).map(|_| ndarray::Array3::zeros((4, 4, 3))).collect();
    let clip = VideoClip::new("c", 0, frames).unwrap();
    let starts = SAMPLER_FRAMES - SAMPLER_DELTA_MAX;
    let mut counts = vec![0usize; starts * SAMPLER_DELTA_MAX];
    let mut out_of_range = 0usize;
    let mut rng = seed::rng(41, &[]);
    for _ in 0..SAMPLER_DRAWS {
        let p = sample_pair(&clip, SAMPLER_DELTA_MAX, &mut rng).unwrap();
        if p.t < 1 || p.delta < 1 || p.delta > SAMPLER_DELTA_MAX || p.t + p.delta > SAMPLER_FRAMES {
            out_of_range += 1;
            continue;
        }
        counts[(p.t - 1) * SAMPLER_DELTA_MAX + p.delta - 1] += 1;
    }
    let cells = counts.len() as f64;
    let expected = SAMPLER_DRAWS as f64 / cells;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p_value = ChiSquared::new(cells - 1.0).unwrap().sf(stat);

    let mut epoch_oob = 0usize;
    let clips = vec![clip; 8];
    let cfg = SamplerConfig {
        delta_min: 1,
        delta_max: SAMPLER_DELTA_MAX,
        pairs_per_video: 4,
        batch_size: 4,
    };
    for e in 0..100 {
        for b in build_epoch(&clips, &cfg, e).unwrap() {
            epoch_oob += b.pairs.iter().filter(|p| p.t + p.delta > SAMPLER_FRAMES || p.t < 1).count();
        }
    }
    outcome(
        p_value > SAMPLER_ALPHA && out_of_range == 0 && epoch_oob == 0 && counts.len() == 21,
        format!(
            "chi2 {stat:.2} on {} cells ({}x{}), p = {p_value:.3}; out-of-range pairs: {}",
            counts.len(),
            starts,
            SAMPLER_DELTA_MAX,
            out_of_range + epoch_oob
        ),
    )
}

fn run_steps(state: &mut TrainState, clips: &[VideoClip], cfg: &vessa_core::trainer::TrainConfig, mask: &TrainableSet, label: &str, n: usize) {
    let mut done = 0;
    let mut epoch = 0u64;
    while done < n {
        let batches = build_epoch(clips, &cfg.sampler, seed::derive(cfg.seed, &[epoch])).unwrap();
        for (bi, raw) in batches.iter().enumerate() {
            if done == n {
                break;
            }
            let aug = augment_batch(raw, &cfg.augment, cfg.view_source, seed::derive(cfg.seed, &[epoch, bi as u64])).unwrap();
            let ctx = StepContext {
                trainable: mask,
                lr: 1e-3,
                loss: &cfg.loss,
                optim: &cfg.optim,
                phase_label: label,
                batch_index: bi,
            };
            train_step(state, &aug, &ctx).unwrap();
            done += 1;
        }
        epoch += 1;
    }
}

fn criterion_5_freeze(pretrained: &ModelParams<f32>, corpora: &Corpora, cfg: &ExperimentConfig) -> Outcome {
    let tc = cfg.train_config();
    let clips = corpora.target_split.train_owned(&corpora.target);
    let mut state = init_state(&tc, pretrained).unwrap();
    let head_mask = trainable_mask(&tc.schedule, Phase::HeadOnly, pretrained.config.depth).unwrap();
    run_steps(&mut state, &clips, &tc, &head_mask, "head_only", FREEZE_STEPS);
    let backbone_same = state.params.backbone == pretrained.backbone;
    let head_moved = state.params.head != init_state(&tc, pretrained).unwrap().params.head;
    let adapters_untouched = state.adapters == init_state(&tc, pretrained).unwrap().adapters;

    let boundary = state.clone();
    let staged_mask = trainable_mask(&tc.schedule, Phase::Staged, pretrained.config.depth).unwrap();
    run_steps(&mut state, &clips, &tc, &staged_mask, "staged", FREEZE_STEPS);
    let before = boundary.params.named_tensors();
    let after = state.params.named_tensors();
    let mut frozen = 0;
    let mut violations = Vec::new();
    let mut moved = 0;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if staged_mask.contains(name) {
            moved += usize::from(a != b);
        } else {
            frozen += 1;
            if a != b {
                violations.push(name.clone());
            }
        }
    }
    let adapters_moved = boundary.adapters != state.adapters;
    outcome(
        backbone_same && head_moved && adapters_untouched && violations.is_empty() && moved > 0 && adapters_moved,
        format!(
            "phase 1: backbone bit-identical {backbone_same}, head moved {head_moved}; phase 2: {frozen} frozen tensors, {} changed {:?}, {moved} trainable tensors moved",
            violations.len(),
            violations
        ),
    )
}

fn criterion_6_knn() -> Outcome {
    let mut mismatched = 0;
    let mut points = 0;
    let mut rng = seed::rng(61, &[]);
    for inst in 0..KNN_INSTANCES as u64 {
        let n_train = rng.random_range(1..=KNN_MAX_POINTS / 2);
        let n_test = rng.random_range(1..=KNN_MAX_POINTS - n_train);
        let dim = rng.random_range(1..=16);
        let classes = rng.random_range(1..=6);
        let k = [1, 1, 3, 5][inst as usize % 4].min(n_train);
        let (tr, tl) = random_points(n_train, dim, classes, 100 + inst);
        let (te, el) = random_points(n_test, dim, classes, 200 + inst);
        let ids = |n: usize| (0..n).map(|i| i.to_string()).collect();
        let train = EmbeddingIndex::new(tr.clone(), tl.clone(), ids(n_train)).unwrap();
        let test = EmbeddingIndex::new(te.clone(), el, ids(n_test)).unwrap();
        let got = knn_predict(&train, &test, k, Metric::Euclidean).unwrap();
        let want = brute_force_knn(&tr, &tl, &te, k);
        mismatched += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        points += n_train + n_test;
    }
    outcome(
        mismatched == 0,
        format!("{KNN_INSTANCES} instances, {points} points, {mismatched} predictions differ from the exhaustive oracle"),
    )
}

struct EndToEnd {
    pretrained_source: f64,
    pretrained_target: f64,
    random_source: f64,
    pretrain_first_epoch_loss: f64,
    pretrain_last_epoch_loss: f64,
    vessa: TableRow,
    static_baseline: TableRow,
    no_head: TableRow,
    elapsed: Duration,
    vessa_seed0_dir: tempfile::TempDir,
}

fn epoch_mean(metrics: &[vessa_core::trainer::StepMetrics], epochs: usize, which: usize) -> f64 {
    let per = metrics.len() / epochs;
    let slice = &metrics[which * per..(which + 1) * per];
    slice.iter().map(|m| m.loss).sum::<f64>() / per as f64
}

fn end_to_end(cfg: &ExperimentConfig, corpora: &Corpora, pre: &experiments::Pretrained, t0: Instant) -> EndToEnd {
    let probe = experiments::probe_unadapted(cfg, &pre.params, corpora).unwrap();
    let random = ModelParams::<f32>::init(cfg.model(), &mut seed::rng(cfg.seed, &[99]));
    let random_source = experiments::evaluate_domain(cfg, &random, corpora, Domain::Source).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let arm = |view: ViewSource, head: usize, label: &str| {
        let c = ExperimentConfig {
            view_source: view,
            head_only_epochs: head,
            ..cfg.clone()
        };
        experiments::run_arm(label, &c, &pre.params, corpora, SEEDS, Some(dir.path())).unwrap()
    };
    let vessa = arm(ViewSource::Video, cfg.head_only_epochs, "vessa");
    let static_baseline = arm(ViewSource::Static, cfg.head_only_epochs, "static");
    let no_head = arm(ViewSource::Video, 0, "no-head");
    EndToEnd {
        pretrained_source: probe.source_accuracy,
        pretrained_target: probe.target_accuracy,
        random_source,
        pretrain_first_epoch_loss: epoch_mean(&pre.metrics, cfg.pretrain_epochs, 0),
        pretrain_last_epoch_loss: epoch_mean(&pre.metrics, cfg.pretrain_epochs, cfg.pretrain_epochs - 1),
        vessa,
        static_baseline,
        no_head,
        elapsed: t0.elapsed(),
        vessa_seed0_dir: dir,
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn per_seed(r: &TableRow) -> String {
    r.runs.iter().map(|a| pct(a.target_accuracy)).collect::<Vec<_>>().join("/")
}

fn criterion_7_ordering(e: &EndToEnd) -> Outcome {
    let v = e.vessa.mean_target_accuracy;
    let s = e.static_baseline.mean_target_accuracy;
    let p = e.pretrained_target;
    outcome(
        v > p && v >= s + STATIC_MARGIN && e.elapsed < E2E_BUDGET,
        format!(
            "target k-NN: VESSA {} [{}], Static-baseline {} [{}], Pretrained {}; pretraining+arms {:.1} min on {} thread(s)",
            pct(v),
            per_seed(&e.vessa),
            pct(s),
            per_seed(&e.static_baseline),
            pct(p),
            e.elapsed.as_secs_f64() / 60.0,
            rayon::current_num_threads()
        ),
    )
}

fn criterion_8_head_warmup(e: &EndToEnd) -> Outcome {
    let full = e.vessa.mean_target_accuracy;
    let none = e.no_head.mean_target_accuracy;
    outcome(
        none < full,
        format!("target k-NN: head_only_epochs=0 {} [{}] vs full schedule {}", pct(none), per_seed(&e.no_head), pct(full)),
    )
}

fn criterion_9_forgetting(e: &EndToEnd) -> Outcome {
    let src = e.vessa.mean_source_accuracy;
    let tgt = e.vessa.mean_target_accuracy;
    outcome(
        src < e.pretrained_source && tgt > e.pretrained_target,
        format!(
            "source {} -> {}, target {} -> {} (pretrained -> VESSA)",
            pct(e.pretrained_source),
            pct(src),
            pct(e.pretrained_target),
            pct(tgt)
        ),
    )
}

fn read_logs(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10_determinism(cfg: &ExperimentConfig, corpora: &Corpora, pre: &experiments::Pretrained, e: &EndToEnd) -> Outcome {
    let first = e.vessa_seed0_dir.path().join("vessa").join("seed-0").join(METRICS_FILE);
    let again = tempfile::tempdir().unwrap();
    let tc = experiments::repetition_config(cfg, 0);
    experiments::adapt_and_eval(cfg, &tc, &pre.params, corpora, Some(again.path())).unwrap();
    let desk_same = std::fs::read(&first).unwrap() == std::fs::read(again.path().join(METRICS_FILE)).unwrap();

    let tiny = tiny_experiment();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        experiments::reproduce(experiments::Preset::AblationTable1, &tiny, 2, Some(d.path())).unwrap();
    }
    let (la, lb) = (read_logs(a.path()), read_logs(b.path()));
    let tiny_same = la == lb && !la.is_empty();
    outcome(
        desk_same && tiny_same,
        format!(
            "desk-scale adaptation log identical on rerun: {desk_same}; {} logs of a full preset (pretrain + {} arms x 2 seeds) identical: {tiny_same}",
            la.len(),
            experiments::ablation_arms(&tiny).len()
        ),
    )
}

fn main() {
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, "gradient correctness", criterion_1_gradients());
    report(2, "LoRA equivalence", criterion_2_lora());
    report(3, "loss identities", criterion_3_loss_identities());
    report(4, "sampler law", criterion_4_sampler());
    report(6, "k-NN oracle", criterion_6_knn());

    let cfg = ExperimentConfig::default();
    let t0 = Instant::now();
    let corpora = Corpora::generate(&cfg).unwrap();
    let pre = experiments::pretrain(&cfg, &corpora, None).unwrap();
    report(5, "freeze integrity", criterion_5_freeze(&pre.params, &corpora, &cfg));
    let e = end_to_end(&cfg, &corpora, &pre, t0);
    println!(
        "             pretraining: source k-NN {} vs random init {}; epoch-mean loss {:.4} -> {:.4}",
        pct(e.pretrained_source),
        pct(e.random_source),
        e.pretrain_first_epoch_loss,
        e.pretrain_last_epoch_loss
    );
    report(7, "end-to-end ordering", criterion_7_ordering(&e));
    report(8, "head-warmup ablation", criterion_8_head_warmup(&e));
    report(9, "forgetting direction", criterion_9_forgetting(&e));
    report(10, "determinism", criterion_10_determinism(&cfg, &corpora, &pre, &e));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
