use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};

use super::{HeadConfig, ViTConfig};
use crate::numeric::Real;
use crate::seed::Rng;

/// Normal draws clipped to two standard deviations.
fn trunc_normal<T: Real>(shape: (usize, usize), std: f64, rng: &mut Rng) -> Array2<T> {
    let n = Normal::new(0.0, std).expect("std > 0");
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = n.sample(rng);
        T::lit(v.clamp(-2.0 * std, 2.0 * std))
    })
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: trunc_normal((input, output), 0.02, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Block<T> {
    fn init(cfg: &ViTConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(d),
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            proj: Linear::init(d, d, rng),
            norm2: LayerNorm::new(d),
            fc1: Linear::init(d, cfg.mlp_dim(), rng),
            fc2: Linear::init(cfg.mlp_dim(), d, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            norm1: self.norm1.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            proj: self.proj.zeros_like(),
            norm2: self.norm2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: Array1<T>,
    /// `[1 + num_patches, embed_dim]`, row 0 belongs to the class token.
    pub pos_embed: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

/// MLP -> bottleneck -> L2 norm -> weight-normalised prototype layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
    /// `[bottleneck, num_prototypes]`; each column is normalised to unit length
    /// in the forward pass.
    pub prototypes: Array2<T>,
}

impl<T: Real> Head<T> {
    pub fn init(embed_dim: usize, cfg: &HeadConfig, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::init(embed_dim, cfg.hidden_dim, rng),
            fc2: Linear::init(cfg.hidden_dim, cfg.hidden_dim, rng),
            fc3: Linear::init(cfg.hidden_dim, cfg.bottleneck_dim, rng),
            prototypes: trunc_normal((cfg.bottleneck_dim, cfg.num_prototypes), 0.02, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            fc3: self.fc3.zeros_like(),
            prototypes: Array2::zeros(self.prototypes.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ViTConfig,
    pub backbone: Backbone<T>,
    pub head: Head<T>,
}

fn push_linear<'a, T>(out: &mut Vec<(String, ArrayViewD<'a, T>)>, name: &str, l: &'a Linear<T>) {
    out.push((format!("{name}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_linear_mut<'a, T>(out: &mut Vec<(String, ArrayViewMutD<'a, T>)>, name: &str, l: &'a mut Linear<T>) {
    out.push((format!("{name}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

fn push_norm<'a, T>(out: &mut Vec<(String, ArrayViewD<'a, T>)>, name: &str, n: &'a LayerNorm<T>) {
    out.push((format!("{name}.gamma"), n.gamma.view().into_dyn()));
    out.push((format!("{name}.beta"), n.beta.view().into_dyn()));
}

fn push_norm_mut<'a, T>(out: &mut Vec<(String, ArrayViewMutD<'a, T>)>, name: &str, n: &'a mut LayerNorm<T>) {
    out.push((format!("{name}.gamma"), n.gamma.view_mut().into_dyn()));
    out.push((format!("{name}.beta"), n.beta.view_mut().into_dyn()));
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: ViTConfig, rng: &mut Rng) -> Self {
        let d = config.embed_dim;
        let backbone = Backbone {
            patch_embed: Linear::init(config.patch_dim(), d, rng),
            cls_token: trunc_normal((1, d), 0.02, rng).into_shape_with_order(d).expect("1 x d"),
            pos_embed: trunc_normal((1 + config.num_patches(), d), 0.02, rng),
            blocks: (0..config.depth).map(|_| Block::init(&config, rng)).collect(),
            norm: LayerNorm::new(d),
        };
        let head = Head::init(d, &config.head, rng);
        Self {
            config,
            backbone,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let b = &self.backbone;
        Self {
            config: self.config,
            backbone: Backbone {
                patch_embed: b.patch_embed.zeros_like(),
                cls_token: Array1::zeros(b.cls_token.raw_dim()),
                pos_embed: Array2::zeros(b.pos_embed.raw_dim()),
                blocks: b.blocks.iter().map(Block::zeros_like).collect(),
                norm: b.norm.zeros_like(),
            },
            head: self.head.zeros_like(),
        }
    }

    /// Every tensor with its stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        let b = &self.backbone;
        push_linear(&mut out, "patch_embed", &b.patch_embed);
        out.push(("cls_token".into(), b.cls_token.view().into_dyn()));
        out.push(("pos_embed".into(), b.pos_embed.view().into_dyn()));
        for (i, blk) in b.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            push_norm(&mut out, &format!("{p}.norm1"), &blk.norm1);
            push_linear(&mut out, &format!("{p}.attn.query"), &blk.query);
            push_linear(&mut out, &format!("{p}.attn.key"), &blk.key);
            push_linear(&mut out, &format!("{p}.attn.value"), &blk.value);
            push_linear(&mut out, &format!("{p}.attn.proj"), &blk.proj);
            push_norm(&mut out, &format!("{p}.norm2"), &blk.norm2);
            push_linear(&mut out, &format!("{p}.mlp.fc1"), &blk.fc1);
            push_linear(&mut out, &format!("{p}.mlp.fc2"), &blk.fc2);
        }
        push_norm(&mut out, "norm", &b.norm);
        push_linear(&mut out, "head.fc1", &self.head.fc1);
        push_linear(&mut out, "head.fc2", &self.head.fc2);
        push_linear(&mut out, "head.fc3", &self.head.fc3);
        out.push(("head.prototypes".into(), self.head.prototypes.view().into_dyn()));
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        let b = &mut self.backbone;
        push_linear_mut(&mut out, "patch_embed", &mut b.patch_embed);
        out.push(("cls_token".into(), b.cls_token.view_mut().into_dyn()));
        out.push(("pos_embed".into(), b.pos_embed.view_mut().into_dyn()));
        for (i, blk) in b.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            push_norm_mut(&mut out, &format!("{p}.norm1"), &mut blk.norm1);
            push_linear_mut(&mut out, &format!("{p}.attn.query"), &mut blk.query);
            push_linear_mut(&mut out, &format!("{p}.attn.key"), &mut blk.key);
            push_linear_mut(&mut out, &format!("{p}.attn.value"), &mut blk.value);
            push_linear_mut(&mut out, &format!("{p}.attn.proj"), &mut blk.proj);
            push_norm_mut(&mut out, &format!("{p}.norm2"), &mut blk.norm2);
            push_linear_mut(&mut out, &format!("{p}.mlp.fc1"), &mut blk.fc1);
            push_linear_mut(&mut out, &format!("{p}.mlp.fc2"), &mut blk.fc2);
        }
        push_norm_mut(&mut out, "norm", &mut b.norm);
        push_linear_mut(&mut out, "head.fc1", &mut self.head.fc1);
        push_linear_mut(&mut out, "head.fc2", &mut self.head.fc2);
        push_linear_mut(&mut out, "head.fc3", &mut self.head.fc3);
        out.push(("head.prototypes".into(), self.head.prototypes.view_mut().into_dyn()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Element type conversion (e.g. f32 checkpoint -> f64 gradient check).
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros_like_config(self);
        for ((_, src), (_, mut dst)) in self.named_tensors().into_iter().zip(out.named_tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::lit(s.to_f64_lossy()));
        }
        out
    }

    fn zeros_like_config<S: Real>(other: &ModelParams<S>) -> Self {
        let b = &other.backbone;
        let lin = |l: &Linear<S>| Linear::<T> {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        };
        let ln = |n: &LayerNorm<S>| LayerNorm::<T> {
            gamma: Array1::zeros(n.gamma.raw_dim()),
            beta: Array1::zeros(n.beta.raw_dim()),
        };
        Self {
            config: other.config,
            backbone: Backbone {
                patch_embed: lin(&b.patch_embed),
                cls_token: Array1::zeros(b.cls_token.raw_dim()),
                pos_embed: Array2::zeros(b.pos_embed.raw_dim()),
                blocks: b
                    .blocks
                    .iter()
                    .map(|k| Block {
                        norm1: ln(&k.norm1),
                        query: lin(&k.query),
                        key: lin(&k.key),
                        value: lin(&k.value),
                        proj: lin(&k.proj),
                        norm2: ln(&k.norm2),
                        fc1: lin(&k.fc1),
                        fc2: lin(&k.fc2),
                    })
                    .collect(),
                norm: ln(&b.norm),
            },
            head: Head {
                fc1: lin(&other.head.fc1),
                fc2: lin(&other.head.fc2),
                fc3: lin(&other.head.fc3),
                prototypes: Array2::zeros(other.head.prototypes.raw_dim()),
            },
        }
    }

    /// Overwrites tensors by name. Unknown names and shape mismatches are errors.
    pub fn load_named(&mut self, tensors: &[(String, ArrayD<T>)]) -> crate::Result<()> {
        let mut by_name: std::collections::HashMap<&str, &ArrayD<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, mut dst) in self.named_tensors_mut() {
            let src = by_name
                .remove(name.as_str())
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(src);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(crate::Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}
