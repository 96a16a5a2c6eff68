//! Forward and hand-derived backward passes.
//!
//! Activations of a batch of equally sized images are stacked as a
//! `[batch * tokens, embed_dim]` matrix so every linear layer is one GEMM;
//! attention is evaluated per image and head on row/column slices.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayD, Axis};

use super::lora::{Adapters, LoraAdapter, Projection};
use super::params::{Block, LayerNorm, Linear, ModelParams};
use super::TrainableSet;
use crate::numeric::{bilinear_matrix, gelu, gelu_grad, softmax_rows, Real};
use crate::{Error, Image, Result};

#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// Class-token embedding after the final norm, `[batch, embed_dim]`.
    pub embedding: Array2<T>,
    /// Prototype logits, `[batch, num_prototypes]`.
    pub logits: Array2<T>,
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Array2<T>,
    lora_mid: [Option<Array2<T>>; 3],
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LnCache<T>,
    h2: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

struct HeadCache<T> {
    z0: Array2<T>,
    a1: Array2<T>,
    h1: Array2<T>,
    a2: Array2<T>,
    h2: Array2<T>,
    zn: Array2<T>,
    norms: Array1<T>,
    wn: Array2<T>,
    colnorm: Array1<T>,
}

struct Record<T> {
    batch: usize,
    tokens: usize,
    patches: Array2<T>,
    interp: Option<Array2<T>>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    head: HeadCache<T>,
}

/// Activations recorded by [`forward_recorded`] and consumed by [`backward`].
pub struct Tape<T> {
    record: Option<Record<T>>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self { record: None }
    }
}

impl<T> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

/// Named gradients, restricted to the trainable set they were computed for.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<T> {
    pub tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Elementwise sum; names missing on either side are carried over.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (name, g) in other.tensors {
            match self.tensors.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.tensors.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.tensors.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors
            .values()
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    fn collect(params: &ModelParams<T>, adapters: &Adapters<T>, trainable: &TrainableSet) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .chain(adapters.named_tensors())
            .filter(|(n, _)| trainable.contains(n))
            .map(|(n, t)| (n, t.to_owned()))
            .collect();
        Self { tensors }
    }
}

/// Splits square images into row-major patches flattened in `(y, x, channel)`
/// order. Returns `[batch * grid^2, patch^2 * channels]` and the grid side.
pub fn patchify<T: Real>(images: &[Image], patch: usize) -> Result<(Array2<T>, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
    let (h, w, c) = first.dim();
    if h != w || h % patch != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not a square multiple of patch size {patch}"
        )));
    }
    if let Some(bad) = images.iter().find(|im| im.dim() != (h, w, c)) {
        return Err(Error::Dimension(format!(
            "mixed image shapes in batch: {:?} vs {:?}",
            bad.dim(),
            (h, w, c)
        )));
    }
    let grid = h / patch;
    let n = grid * grid;
    let pd = patch * patch * c;
    let mut out = Array2::<T>::zeros((images.len() * n, pd));
    for (b, im) in images.iter().enumerate() {
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = out.row_mut(b * n + gy * grid + gx);
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            row[k] = T::lit(f64::from(im[[gy * patch + py, gx * patch + px, ch]]));
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((out, grid))
}

fn ln_forward<T: Real>(x: &Array2<T>, ln: &LayerNorm<T>, eps: T) -> (Array2<T>, LnCache<T>) {
    let d = T::from_usize(x.ncols()).expect("width");
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        let is = T::one() / (var + eps).sqrt();
        row *= is;
        inv_std[i] = is;
    }
    let mut y = &xhat * &ln.gamma;
    y += &ln.beta;
    (y, LnCache { xhat, inv_std })
}

fn ln_backward<T: Real>(gy: &Array2<T>, ln: &LayerNorm<T>, cache: &LnCache<T>, grad: Option<&mut LayerNorm<T>>) -> Array2<T> {
    if let Some(g) = grad {
        g.gamma += &(gy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &gy.sum_axis(Axis(0));
    }
    let d = T::from_usize(gy.ncols()).expect("width");
    let gxhat = gy * &ln.gamma;
    let mut gx = Array2::zeros(gy.raw_dim());
    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
        let gh = gxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = gh.sum() / d;
        let m2 = gh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        let is = cache.inv_std[i];
        for ((o, &g), &x) in row.iter_mut().zip(gh.iter()).zip(xh.iter()) {
            *o = is * (g - m1 - x * m2);
        }
    }
    gx
}

fn linear_backward<T: Real>(lin: &Linear<T>, x: &Array2<T>, gy: &Array2<T>, grad: Option<&mut Linear<T>>) -> Array2<T> {
    if let Some(g) = grad {
        g.weight += &x.t().dot(gy);
        g.bias += &gy.sum_axis(Axis(0));
    }
    gy.dot(&lin.weight.t())
}

fn projection<'a, T: Real>(blk: &'a Block<T>, p: Projection) -> &'a Linear<T> {
    match p {
        Projection::Query => &blk.query,
        Projection::Key => &blk.key,
        Projection::Value => &blk.value,
    }
}

fn projection_mut<T: Real>(blk: &mut Block<T>, p: Projection) -> &mut Linear<T> {
    match p {
        Projection::Query => &mut blk.query,
        Projection::Key => &mut blk.key,
        Projection::Value => &mut blk.value,
    }
}

struct Shape {
    batch: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
}

fn block_forward<T: Real>(
    blk: &Block<T>,
    lora: [Option<&LoraAdapter<T>>; 3],
    x: Array2<T>,
    sh: &Shape,
    eps: T,
    record: bool,
) -> (Array2<T>, Option<BlockCache<T>>) {
    let (h1, ln1) = ln_forward(&x, &blk.norm1, eps);
    let mut lora_mid: [Option<Array2<T>>; 3] = [None, None, None];
    let mut qkv: Vec<Array2<T>> = Vec::with_capacity(3);
    for (j, p) in Projection::ALL.into_iter().enumerate() {
        let mut y = projection(blk, p).forward(&h1);
        if let Some(ad) = lora[j] {
            let mid = h1.dot(&ad.a);
            y += &mid.dot(&ad.b);
            lora_mid[j] = Some(mid);
        }
        qkv.push(y);
    }
    let v = qkv.pop().expect("v");
    let k = qkv.pop().expect("k");
    let q = qkv.pop().expect("q");

    let scale = T::one() / T::from_usize(sh.head_dim).expect("dim").sqrt();
    let mut o = Array2::<T>::zeros(q.raw_dim());
    let mut attn = Vec::with_capacity(if record { sh.batch * sh.heads } else { 0 });
    for b in 0..sh.batch {
        let rows = b * sh.tokens..(b + 1) * sh.tokens;
        for h in 0..sh.heads {
            let cols = h * sh.head_dim..(h + 1) * sh.head_dim;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qh.dot(&kh.t());
            p.mapv_inplace(|e| e * scale);
            softmax_rows(&mut p);
            o.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
            if record {
                attn.push(p);
            }
        }
    }
    let mut x1 = blk.proj.forward(&o);
    x1 += &x;
    let (h2, ln2) = ln_forward(&x1, &blk.norm2, eps);
    let pre = blk.fc1.forward(&h2);
    let act = pre.mapv(gelu);
    let mut out = blk.fc2.forward(&act);
    out += &x1;
    let cache = record.then(|| BlockCache {
        ln1,
        h1,
        lora_mid,
        q,
        k,
        v,
        attn,
        o,
        ln2,
        h2,
        pre,
        act,
    });
    (out, cache)
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    index: usize,
    blk: &Block<T>,
    lora: [Option<&LoraAdapter<T>>; 3],
    cache: &BlockCache<T>,
    gy: Array2<T>,
    sh: &Shape,
    grads: &mut Block<T>,
    glora: &mut Adapters<T>,
    trainable: &TrainableSet,
) -> Array2<T> {
    let need = |tail: &str| trainable.contains(&format!("blocks.{index}.{tail}"));

    let gact = linear_backward(&blk.fc2, &cache.act, &gy, need("mlp.fc2.weight").then_some(&mut grads.fc2));
    let gpre = &gact * &cache.pre.mapv(gelu_grad);
    let gh2 = linear_backward(&blk.fc1, &cache.h2, &gpre, need("mlp.fc1.weight").then_some(&mut grads.fc1));
    let mut gx1 = ln_backward(&gh2, &blk.norm2, &cache.ln2, need("norm2.gamma").then_some(&mut grads.norm2));
    gx1 += &gy;

    let go = linear_backward(&blk.proj, &cache.o, &gx1, need("attn.proj.weight").then_some(&mut grads.proj));
    let scale = T::one() / T::from_usize(sh.head_dim).expect("dim").sqrt();
    let mut gq = Array2::<T>::zeros(cache.q.raw_dim());
    let mut gk = Array2::<T>::zeros(cache.k.raw_dim());
    let mut gv = Array2::<T>::zeros(cache.v.raw_dim());
    for b in 0..sh.batch {
        let rows = b * sh.tokens..(b + 1) * sh.tokens;
        for h in 0..sh.heads {
            let cols = h * sh.head_dim..(h + 1) * sh.head_dim;
            let p = &cache.attn[b * sh.heads + h];
            let goh = go.slice(s![rows.clone(), cols.clone()]);
            let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
            let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
            let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
            let gp = goh.dot(&vh.t());
            gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&goh));
            let row_dot = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut gs = &gp - &row_dot;
            gs *= p;
            gs.mapv_inplace(|e| e * scale);
            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&gs.dot(&kh));
            gk.slice_mut(s![rows.clone(), cols]).assign(&gs.t().dot(&qh));
        }
    }

    let mut gh1 = Array2::<T>::zeros(cache.h1.raw_dim());
    for (j, (p, g)) in Projection::ALL.into_iter().zip([&gq, &gk, &gv]).enumerate() {
        let lin = projection(blk, p);
        let wname = format!("attn.{}.weight", p.tag());
        gh1 += &linear_backward(lin, &cache.h1, g, need(&wname).then_some(projection_mut(grads, p)));
        if let (Some(ad), Some(mid)) = (lora[j], cache.lora_mid[j].as_ref()) {
            let gmid = g.dot(&ad.b.t());
            let prefix = format!("lora.{index}.{}", p.tag());
            if trainable.contains(&format!("{prefix}.a")) {
                let ga = glora.get_mut(index, p).expect("adapter grads mirror adapters");
                ga.b += &mid.t().dot(g);
                ga.a += &cache.h1.t().dot(&gmid);
            }
            gh1 += &gmid.dot(&ad.a.t());
        }
    }
    let mut gx = ln_backward(&gh1, &blk.norm1, &cache.ln1, need("norm1.gamma").then_some(&mut grads.norm1));
    gx += &gx1;
    gx
}

fn head_forward<T: Real>(params: &ModelParams<T>, z0: &Array2<T>) -> (Array2<T>, HeadCache<T>) {
    let head = &params.head;
    let a1 = head.fc1.forward(z0);
    let h1 = a1.mapv(gelu);
    let a2 = head.fc2.forward(&h1);
    let h2 = a2.mapv(gelu);
    let z = head.fc3.forward(&h2);
    let eps = T::lit(1e-12);
    let norms = z.map_axis(Axis(1), |r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps));
    let zn = &z / &norms.view().insert_axis(Axis(1));
    let colnorm = head
        .prototypes
        .map_axis(Axis(0), |c| c.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps));
    let wn = &head.prototypes / &colnorm.view().insert_axis(Axis(0));
    let logits = zn.dot(&wn);
    (
        logits,
        HeadCache {
            z0: z0.clone(),
            a1,
            h1,
            a2,
            h2,
            zn,
            norms,
            wn,
            colnorm,
        },
    )
}

fn head_backward<T: Real>(params: &ModelParams<T>, c: &HeadCache<T>, gl: &Array2<T>, grads: &mut ModelParams<T>, trainable: &TrainableSet) -> Array2<T> {
    let head = &params.head;
    let g = &mut grads.head;
    let need = |n: &str| trainable.contains(n);
    let gzn = gl.dot(&c.wn.t());
    if need("head.prototypes") {
        let gwn = c.zn.t().dot(gl);
        let proj = (&gwn * &c.wn).sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut gv = &gwn - &(&c.wn * &proj);
        gv /= &c.colnorm.view().insert_axis(Axis(0));
        g.prototypes += &gv;
    }
    let along = (&gzn * &c.zn).sum_axis(Axis(1)).insert_axis(Axis(1));
    let mut gz = &gzn - &(&c.zn * &along);
    gz /= &c.norms.view().insert_axis(Axis(1));
    let gh2 = linear_backward(&head.fc3, &c.h2, &gz, need("head.fc3.weight").then_some(&mut g.fc3));
    let ga2 = &gh2 * &c.a2.mapv(gelu_grad);
    let gh1 = linear_backward(&head.fc2, &c.h1, &ga2, need("head.fc2.weight").then_some(&mut g.fc2));
    let ga1 = &gh1 * &c.a1.mapv(gelu_grad);
    linear_backward(&head.fc1, &c.z0, &ga1, need("head.fc1.weight").then_some(&mut g.fc1))
}

fn lora_for<'a, T: Real>(adapters: Option<&'a Adapters<T>>, block: usize) -> [Option<&'a LoraAdapter<T>>; 3] {
    Projection::ALL.map(|p| adapters.and_then(|a| a.get(block, p)))
}

fn run<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&Adapters<T>>,
    patches: Array2<T>,
    batch: usize,
    grid: usize,
    record: bool,
    with_head: bool,
) -> Result<(ModelOutput<T>, Option<Record<T>>)> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    if patches.ncols() != cfg.patch_dim() {
        return Err(Error::Dimension(format!(
            "patch width {} does not match configured {}",
            patches.ncols(),
            cfg.patch_dim()
        )));
    }
    let n = grid * grid;
    if batch == 0 || patches.nrows() != batch * n {
        return Err(Error::Dimension(format!(
            "{} patch rows for batch {batch} of {n} patches",
            patches.nrows()
        )));
    }
    let tokens = n + 1;
    let bb = &params.backbone;
    let base_grid = cfg.grid();
    let base_pos = bb.pos_embed.slice(s![1.., ..]);
    let interp = (grid != base_grid).then(|| bilinear_matrix::<T>(base_grid, grid));
    let pos_patch = match &interp {
        Some(m) => m.dot(&base_pos),
        None => base_pos.to_owned(),
    };
    let tok = bb.patch_embed.forward(&patches);
    let cls_row = &bb.cls_token + &bb.pos_embed.row(0);
    let mut x = Array2::<T>::zeros((batch * tokens, d));
    for b in 0..batch {
        x.row_mut(b * tokens).assign(&cls_row);
        let mut body = x.slice_mut(s![b * tokens + 1..(b + 1) * tokens, ..]);
        body.assign(&tok.slice(s![b * n..(b + 1) * n, ..]));
        body += &pos_patch;
    }
    let sh = Shape {
        batch,
        tokens,
        heads: cfg.num_heads,
        head_dim: cfg.head_dim(),
    };
    let eps = T::lit(cfg.layer_norm_eps);
    let mut caches = Vec::with_capacity(if record { cfg.depth } else { 0 });
    for (i, blk) in bb.blocks.iter().enumerate() {
        let (next, cache) = block_forward(blk, lora_for(adapters, i), x, &sh, eps, record);
        x = next;
        if let Some(c) = cache {
            caches.push(c);
        }
    }
    let cls_idx: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let xc = x.select(Axis(0), &cls_idx);
    let (embedding, final_ln) = ln_forward(&xc, &bb.norm, eps);
    if !with_head {
        return Ok((
            ModelOutput {
                embedding,
                logits: Array2::zeros((batch, 0)),
            },
            None,
        ));
    }
    let (logits, head) = head_forward(params, &embedding);
    let rec = record.then(|| Record {
        batch,
        tokens,
        patches,
        interp,
        blocks: caches,
        final_ln,
        head,
    });
    Ok((ModelOutput { embedding, logits }, rec))
}

fn check_config<T: Real>(params: &ModelParams<T>) -> Result<()> {
    params.config.validate()?;
    if params.backbone.blocks.len() != params.config.depth {
        return Err(Error::Dimension("block count does not match depth".into()));
    }
    Ok(())
}

/// Inference forward pass; adapted projections compute `(W + A B) x`.
pub fn forward<T: Real>(params: &ModelParams<T>, adapters: Option<&Adapters<T>>, images: &[Image]) -> Result<ModelOutput<T>> {
    check_config(params)?;
    let (patches, grid) = patchify::<T>(images, params.config.patch_size)?;
    Ok(run(params, adapters, patches, images.len(), grid, false, true)?.0)
}

/// Forward pass that records activations for [`backward`].
pub fn forward_recorded<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&Adapters<T>>,
    images: &[Image],
    tape: &mut Tape<T>,
) -> Result<ModelOutput<T>> {
    check_config(params)?;
    let (patches, grid) = patchify::<T>(images, params.config.patch_size)?;
    let (out, rec) = run(params, adapters, patches, images.len(), grid, true, true)?;
    tape.record = rec;
    Ok(out)
}

/// Forward pass from already extracted patch rows (`[batch * n, patch_dim]`,
/// `n` a perfect square).
pub fn forward_from_patches<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&Adapters<T>>,
    patches: Array2<T>,
    batch: usize,
) -> Result<ModelOutput<T>> {
    check_config(params)?;
    if batch == 0 || patches.nrows() % batch != 0 {
        return Err(Error::Dimension("patch rows not divisible by batch".into()));
    }
    let n = patches.nrows() / batch;
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::Dimension(format!("{n} patches do not form a square grid")));
    }
    Ok(run(params, adapters, patches, batch, grid, false, true)?.0)
}

/// Backbone-only forward pass returning class-token embeddings.
pub fn embed<T: Real>(params: &ModelParams<T>, adapters: Option<&Adapters<T>>, images: &[Image]) -> Result<Array2<T>> {
    check_config(params)?;
    let (patches, grid) = patchify::<T>(images, params.config.patch_size)?;
    Ok(run(params, adapters, patches, images.len(), grid, false, false)?.0.embedding)
}

/// Back-propagates `grad_logits` (and optionally a gradient on the embedding)
/// through the recorded pass. Only tensors in `trainable` receive gradients;
/// the tape is consumed.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&Adapters<T>>,
    tape: &mut Tape<T>,
    grad_logits: &Array2<T>,
    grad_embedding: Option<&Array2<T>>,
    trainable: &TrainableSet,
) -> Result<Gradients<T>> {
    let rec = tape
        .record
        .take()
        .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
    let cfg = &params.config;
    let k = cfg.head.num_prototypes;
    if grad_logits.dim() != (rec.batch, k) {
        return Err(Error::Dimension(format!(
            "upstream gradient {:?}, expected {:?}",
            grad_logits.dim(),
            (rec.batch, k)
        )));
    }
    let empty = Adapters::empty();
    let adapters = adapters.unwrap_or(&empty);
    let mut grads = params.zeros_like();
    let mut glora = adapters.zeros_like();

    let mut g_emb = head_backward(params, &rec.head, grad_logits, &mut grads, trainable);
    if let Some(ge) = grad_embedding {
        if ge.dim() != g_emb.dim() {
            return Err(Error::Dimension("embedding gradient shape mismatch".into()));
        }
        g_emb += ge;
    }

    if trainable.any_backbone() {
        let bb = &params.backbone;
        let gxc = ln_backward(
            &g_emb,
            &bb.norm,
            &rec.final_ln,
            trainable.contains("norm.gamma").then_some(&mut grads.backbone.norm),
        );
        if let Some(lowest) = trainable.lowest_backbone_block() {
            let sh = Shape {
                batch: rec.batch,
                tokens: rec.tokens,
                heads: cfg.num_heads,
                head_dim: cfg.head_dim(),
            };
            let mut gx = Array2::<T>::zeros((rec.batch * rec.tokens, cfg.embed_dim));
            for b in 0..rec.batch {
                gx.row_mut(b * rec.tokens).assign(&gxc.row(b));
            }
            for i in (lowest..cfg.depth).rev() {
                gx = block_backward(
                    i,
                    &bb.blocks[i],
                    lora_for(Some(adapters), i),
                    &rec.blocks[i],
                    gx,
                    &sh,
                    &mut grads.backbone.blocks[i],
                    &mut glora,
                    trainable,
                );
            }
            if trainable.embeddings {
                let n = rec.tokens - 1;
                let gb = &mut grads.backbone;
                let mut gpos_patch = Array2::<T>::zeros((n, cfg.embed_dim));
                let mut gtok = Array2::<T>::zeros((rec.batch * n, cfg.embed_dim));
                for b in 0..rec.batch {
                    let row0 = gx.row(b * rec.tokens);
                    gb.cls_token += &row0;
                    let mut p0 = gb.pos_embed.row_mut(0);
                    p0 += &row0;
                    let body = gx.slice(s![b * rec.tokens + 1..(b + 1) * rec.tokens, ..]);
                    gpos_patch += &body;
                    gtok.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&body);
                }
                let gpos_base = match &rec.interp {
                    Some(m) => m.t().dot(&gpos_patch),
                    None => gpos_patch,
                };
                let mut base = gb.pos_embed.slice_mut(s![1.., ..]);
                base += &gpos_base;
                gb.patch_embed.weight += &rec.patches.t().dot(&gtok);
                gb.patch_embed.bias += &gtok.sum_axis(Axis(0));
            }
        }
    }
    Ok(Gradients::collect(&grads, &glora, trainable))
}
