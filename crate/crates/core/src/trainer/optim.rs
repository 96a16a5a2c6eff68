use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::model::{Adapters, Gradients, ModelParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_head_only: f64,
    pub lr_staged: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_head_only: 5e-4,
            lr_staged: 1e-4,
            min_lr: 1e-6,
            warmup_fraction: 0.1,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_head_only", self.lr_head_only), ("lr_staged", self.lr_staged), ("min_lr", self.min_lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::field(name, "must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::field("warmup_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::field("beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::field("eps", "must be > 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::field("grad_clip", "must be > 0 when set"));
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_fraction` of a phase, then cosine
/// decay from `base` to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base: f64, min_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            base,
            min_lr: min_lr.min(base),
            warmup_steps: (warmup_fraction * total_steps as f64).floor() as u64,
            total_steps,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
    pub steps: u64,
}

/// Adam with decoupled weight decay. Moments are created lazily per tensor, so
/// tensors unfrozen later start from zero state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, adapters: &mut Adapters<f32>, grads: &Gradients<f32>, lr: f64, cfg: &OptimConfig) {
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let tensors = params.named_tensors_mut().into_iter().chain(adapters.named_tensors_mut());
        for (name, mut p) in tensors {
            let Some(g) = grads.get(&name) else { continue };
            let st = self.moments.entry(name).or_insert_with(|| Moments {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.steps as i32);
            let wd = if p.ndim() > 1 { cfg.weight_decay } else { 0.0 };
            let (lr32, wd32, eps32) = (lr as f32, wd as f32, cfg.eps as f32);
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            Zip::from(&mut p).and(&mut st.m).and(&mut st.v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps32) + wd32 * *p;
                *p -= lr32 * update;
            });
        }
    }
}
