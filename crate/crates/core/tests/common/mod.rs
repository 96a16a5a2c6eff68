#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use vessa_core::distill::{uwsd_loss, Assignment};
use vessa_core::model::{
    backward, forward, forward_recorded, inject_lora, qkv_targets, Adapters, HeadConfig, ModelParams, Tape,
    TrainableSet, ViTConfig,
};
use vessa_core::seed;
use vessa_core::Image;

/// Depth-2, width-16 model used by the gradient checks.
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 4,
        head: HeadConfig {
            hidden_dim: 32,
            bottleneck_dim: 8,
            num_prototypes: 10,
        },
        layer_norm_eps: 1e-6,
    }
}

pub fn random_image(size: usize, seed_value: u64) -> Image {
    let mut rng = seed::rng(seed_value, &[]);
    Array3::from_shape_simple_fn((size, size, 3), || rng.random::<f32>())
}

/// Adds Gaussian noise to every tensor so activations are far from the
/// symmetric initialisation.
pub fn jitter_params(params: &mut ModelParams<f64>, std: f64, seed_value: u64) {
    let mut rng = seed::rng(seed_value, &[]);
    let n = Normal::new(0.0, std).unwrap();
    for (_, mut t) in params.named_tensors_mut() {
        t.mapv_inplace(|v| v + n.sample(&mut rng));
    }
}

pub fn jitter_adapters(adapters: &mut Adapters<f64>, std: f64, seed_value: u64) {
    let mut rng = seed::rng(seed_value, &[]);
    let n = Normal::new(0.0, std).unwrap();
    for (_, mut t) in adapters.named_tensors_mut() {
        t.mapv_inplace(|v| v + n.sample(&mut rng));
    }
}

pub fn random_simplex(rows: usize, k: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_value, &[]);
    let mut m = Array2::from_shape_simple_fn((rows, k), || -rng.random::<f64>().max(1e-12).ln());
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

/// Tiny f64 model with LoRA on every block and non-trivial weights.
pub fn gradcheck_model() -> (ModelParams<f64>, Adapters<f64>) {
    let cfg = tiny_config();
    let mut params = ModelParams::<f64>::init(cfg, &mut seed::rng(11, &[]));
    jitter_params(&mut params, 0.15, 12);
    let mut adapters = inject_lora(&params, 2, &qkv_targets(0..cfg.depth), &mut seed::rng(13, &[])).unwrap();
    jitter_adapters(&mut adapters, 0.15, 14);
    (params, adapters)
}

pub struct UwsdProblem {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub q: Array2<f64>,
    pub gamma: f64,
    pub student_temp: f64,
}

impl UwsdProblem {
    pub fn new() -> Self {
        let cfg = tiny_config();
        Self {
            globals: (0..2).map(|i| random_image(cfg.image_size, 100 + i)).collect(),
            locals: (0..2).map(|i| random_image(8, 200 + i)).collect(),
            q: random_simplex(2, cfg.head.num_prototypes, 300),
            gamma: 1.0,
            student_temp: 0.1,
        }
    }

    pub fn loss(&self, params: &ModelParams<f64>, adapters: &Adapters<f64>) -> f64 {
        let s0 = forward(params, Some(adapters), &self.globals).unwrap().logits;
        let s1 = forward(params, Some(adapters), &self.locals).unwrap().logits;
        let a = [Assignment {
            teacher: self.q.view(),
            student_views: vec![0, 1],
        }];
        uwsd_loss(&a, &[s0, s1], self.gamma, self.student_temp).unwrap().loss
    }

    /// Analytic gradient of [`Self::loss`] for every tensor in `trainable`.
    pub fn gradients(
        &self,
        params: &ModelParams<f64>,
        adapters: &Adapters<f64>,
        trainable: &TrainableSet,
    ) -> vessa_core::model::Gradients<f64> {
        let mut t0 = Tape::new();
        let mut t1 = Tape::new();
        let s0 = forward_recorded(params, Some(adapters), &self.globals, &mut t0).unwrap().logits;
        let s1 = forward_recorded(params, Some(adapters), &self.locals, &mut t1).unwrap().logits;
        let a = [Assignment {
            teacher: self.q.view(),
            student_views: vec![0, 1],
        }];
        let out = uwsd_loss(&a, &[s0, s1], self.gamma, self.student_temp).unwrap();
        let mut g = backward(params, Some(adapters), &mut t0, &out.grads[0], None, trainable).unwrap();
        g.accumulate(backward(params, Some(adapters), &mut t1, &out.grads[1], None, trainable).unwrap());
        g
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-5;

pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_name: String,
}

fn set_scalar(params: &mut ModelParams<f64>, adapters: &mut Adapters<f64>, name: &str, idx: usize, value: f64) {
    if name.starts_with("lora.") {
        for (n, mut t) in adapters.named_tensors_mut() {
            if n == name {
                *t.iter_mut().nth(idx).unwrap() = value;
            }
        }
    } else {
        for (n, mut t) in params.named_tensors_mut() {
            if n == name {
                *t.iter_mut().nth(idx).unwrap() = value;
            }
        }
    }
}

/// Central finite differences on every scalar of every gradient tensor.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    adapters: &Adapters<f64>,
    grads: &vessa_core::model::Gradients<f64>,
    loss: impl Fn(&ModelParams<f64>, &Adapters<f64>) -> f64,
) -> FdReport {
    let mut p = params.clone();
    let mut a = adapters.clone();
    let mut report = FdReport {
        checked: 0,
        worst: 0.0,
        worst_name: String::new(),
    };
    for (name, g) in &grads.tensors {
        for (idx, &analytic) in g.iter().enumerate() {
            let base = if name.starts_with("lora.") {
                adapters.named_tensors().into_iter().find(|(n, _)| n == name).unwrap().1.iter().nth(idx).copied().unwrap()
            } else {
                params.named_tensors().into_iter().find(|(n, _)| n == name).unwrap().1.iter().nth(idx).copied().unwrap()
            };
            set_scalar(&mut p, &mut a, name, idx, base + FD_STEP);
            let up = loss(&p, &a);
            set_scalar(&mut p, &mut a, name, idx, base - FD_STEP);
            let down = loss(&p, &a);
            set_scalar(&mut p, &mut a, name, idx, base);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            report.checked += 1;
            if rel > report.worst {
                report.worst = rel;
                report.worst_name = format!("{name}[{idx}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    report
}

/// Small 16-pixel corpus (3 classes x 4 clips x 8 frames).
pub fn tiny_clips(domain: vessa_core::data::Domain, seed_value: u64) -> Vec<vessa_core::data::VideoClip> {
    vessa_core::data::generate_corpus(&vessa_core::data::SynthSpec {
        num_classes: 3,
        videos_per_class: 4,
        frames_per_video: 8,
        image_size: 16,
        domain,
        seed: seed_value,
    })
    .unwrap()
}

/// Adaptation config sized for [`tiny_config`] and [`tiny_clips`]: one epoch
/// per phase, three batches per epoch.
pub fn tiny_train_config() -> vessa_core::trainer::TrainConfig {
    use vessa_core::augment::AugmentConfig;
    use vessa_core::model::FreezeSchedule;
    use vessa_core::sampler::SamplerConfig;
    use vessa_core::trainer::TrainConfig;
    TrainConfig {
        schedule: FreezeSchedule {
            head_only_epochs: 1,
            lora_layers: 1,
            full_layers: 1,
            norms_trainable: true,
        },
        full_epochs: 1,
        lora_rank: 2,
        sampler: SamplerConfig {
            delta_min: 1,
            delta_max: 3,
            pairs_per_video: 1,
            batch_size: 4,
        },
        augment: AugmentConfig {
            global_size: 16,
            local_size: 8,
            num_local_pairs: 1,
            ..AugmentConfig::default()
        },
        seed: 5,
        ..TrainConfig::default()
    }
}

pub fn tiny_pretrained() -> ModelParams<f32> {
    ModelParams::<f32>::init(tiny_config(), &mut seed::rng(77, &[]))
}

/// Exhaustive k-NN: every pairwise distance in f64, stable sort by
/// (distance, index), majority vote with ties to the class seen first.
pub fn brute_force_knn(train: &Array2<f32>, train_labels: &[usize], test: &Array2<f32>, k: usize) -> Vec<usize> {
    test.rows()
        .into_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let s: f64 = r.iter().zip(q.iter()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
                    (s.sqrt(), i)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let top = &d[..k.min(d.len())];
            let mut best: Option<(usize, usize, usize)> = None;
            for (rank, &(_, i)) in top.iter().enumerate() {
                let label = train_labels[i];
                let count = top.iter().filter(|&&(_, j)| train_labels[j] == label).count();
                let first = top.iter().position(|&(_, j)| train_labels[j] == label).unwrap();
                if first != rank {
                    continue;
                }
                if best.is_none_or(|(_, c, f)| count > c || (count == c && first < f)) {
                    best = Some((label, count, first));
                }
            }
            best.unwrap().0
        })
        .collect()
}

/// Random labelled point cloud for the k-NN oracle checks.
pub fn random_points(n: usize, dim: usize, classes: usize, seed_value: u64) -> (Array2<f32>, Vec<usize>) {
    let mut rng = seed::rng(seed_value, &[]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let pts = Array2::from_shape_fn((n, dim), |(i, _)| labels[i] as f32 * 0.5 + rng.random_range(-1.0f32..1.0));
    (pts, labels)
}

/// Experiment config that runs every stage in well under a second.
pub fn tiny_experiment() -> vessa_core::config::ExperimentConfig {
    vessa_core::config::ExperimentConfig {
        num_classes: 3,
        videos_per_class: 4,
        frames_per_video: 8,
        image_size: 16,
        delta_max: 3,
        pairs_per_video: 1,
        batch_size: 4,
        global_size: 16,
        local_size: 8,
        num_local_pairs: 1,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        head_hidden_dim: 32,
        bottleneck_dim: 8,
        num_prototypes: 10,
        head_only_epochs: 1,
        full_epochs: 1,
        lora_layers: 1,
        full_layers: 1,
        lora_rank: 2,
        pretrain_epochs: 1,
        pretrain_num_local_pairs: 1,
        ..Default::default()
    }
}
