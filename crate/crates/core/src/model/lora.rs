use ndarray::{Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::numeric::Real;
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoraTarget {
    pub block: usize,
    pub projection: Projection,
}

/// Low-rank update `dW = A B` on a projection `W: [d, k]`, with `A: [d, r]`
/// and `B: [r, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: LoraTarget,
    pub a: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn delta(&self) -> Array2<T> {
        self.a.dot(&self.b)
    }

    fn prefix(&self) -> String {
        format!("lora.{}.{}", self.target.block, self.target.projection.tag())
    }
}

/// The set of adapters attached to one model, at most one per target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adapters<T> {
    pub entries: Vec<LoraAdapter<T>>,
}

impl<T: Real> Adapters<T> {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, block: usize, projection: Projection) -> Option<&LoraAdapter<T>> {
        self.entries
            .iter()
            .find(|a| a.target.block == block && a.target.projection == projection)
    }

    pub fn get_mut(&mut self, block: usize, projection: Projection) -> Option<&mut LoraAdapter<T>> {
        self.entries
            .iter_mut()
            .find(|a| a.target.block == block && a.target.projection == projection)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|a| LoraAdapter {
                    target: a.target,
                    a: Array2::zeros(a.a.raw_dim()),
                    b: Array2::zeros(a.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.entries
            .iter()
            .flat_map(|a| {
                let p = a.prefix();
                [
                    (format!("{p}.a"), a.a.view().into_dyn()),
                    (format!("{p}.b"), a.b.view().into_dyn()),
                ]
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.entries
            .iter_mut()
            .flat_map(|a| {
                let p = a.prefix();
                [
                    (format!("{p}.a"), a.a.view_mut().into_dyn()),
                    (format!("{p}.b"), a.b.view_mut().into_dyn()),
                ]
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// Rebuilds adapters from `lora.<block>.<proj>.{a,b}` tensors.
    pub fn from_named(tensors: &[(String, ArrayD<T>)]) -> Result<Self> {
        let mut entries: Vec<LoraAdapter<T>> = Vec::new();
        for (name, t) in tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let bad = || Error::Checkpoint(format!("malformed adapter tensor `{name}`"));
            if parts.len() != 4 || parts[0] != "lora" {
                return Err(bad());
            }
            let block: usize = parts[1].parse().map_err(|_| bad())?;
            let projection = match parts[2] {
                "query" => Projection::Query,
                "key" => Projection::Key,
                "value" => Projection::Value,
                _ => return Err(bad()),
            };
            let m = t
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| bad())?;
            let target = LoraTarget { block, projection };
            let idx = match entries.iter().position(|e| e.target == target) {
                Some(i) => i,
                None => {
                    entries.push(LoraAdapter {
                        target,
                        a: Array2::zeros((0, 0)),
                        b: Array2::zeros((0, 0)),
                    });
                    entries.len() - 1
                }
            };
            match parts[3] {
                "a" => entries[idx].a = m,
                "b" => entries[idx].b = m,
                _ => return Err(bad()),
            }
        }
        for e in &entries {
            if e.a.ncols() == 0 || e.a.ncols() != e.b.nrows() {
                return Err(Error::Checkpoint(format!(
                    "adapter {:?} has inconsistent factor shapes",
                    e.target
                )));
            }
        }
        Ok(Self { entries })
    }
}

/// Attaches one zero-initialised adapter (`A ~ N(0, 0.02^2)`, `B = 0`) per
/// target. The base projection weights are left untouched.
pub fn inject_lora<T: Real>(
    params: &ModelParams<T>,
    rank: usize,
    targets: &[LoraTarget],
    rng: &mut Rng,
) -> Result<Adapters<T>> {
    if rank == 0 {
        return Err(Error::field("lora_rank", "must be >= 1"));
    }
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut out = Adapters::empty();
    for &target in targets {
        let block = params.backbone.blocks.get(target.block).ok_or_else(|| {
            Error::field(
                "lora_targets",
                format!("block {} does not exist (depth {})", target.block, params.config.depth),
            )
        })?;
        if out.get(target.block, target.projection).is_some() {
            return Err(Error::field("lora_targets", format!("duplicate target {target:?}")));
        }
        let lin = match target.projection {
            Projection::Query => &block.query,
            Projection::Key => &block.key,
            Projection::Value => &block.value,
        };
        let (d, k) = (lin.in_dim(), lin.out_dim());
        if rank >= d.min(k) {
            return Err(Error::field(
                "lora_rank",
                format!("rank {rank} must be below min(d, k) = {}", d.min(k)),
            ));
        }
        out.entries.push(LoraAdapter {
            target,
            a: Array2::from_shape_simple_fn((d, rank), || T::lit(normal.sample(rng))),
            b: Array2::zeros((rank, k)),
        });
    }
    Ok(out)
}

/// Query, key and value targets for every block in `blocks`.
pub fn qkv_targets(blocks: impl IntoIterator<Item = usize>) -> Vec<LoraTarget> {
    blocks
        .into_iter()
        .flat_map(|block| Projection::ALL.map(|projection| LoraTarget { block, projection }))
        .collect()
}

impl<T: Real> ModelParams<T> {
    /// Dense copy with every adapted projection replaced by `W + A B`.
    pub fn merged(&self, adapters: &Adapters<T>) -> Self {
        let mut out = self.clone();
        for a in &adapters.entries {
            let blk = &mut out.backbone.blocks[a.target.block];
            let lin = match a.target.projection {
                Projection::Query => &mut blk.query,
                Projection::Key => &mut blk.key,
                Projection::Value => &mut blk.value,
            };
            lin.weight += &a.delta();
        }
        out
    }
}
