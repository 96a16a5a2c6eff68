//! Backbone embedding extraction and k-nearest-neighbour evaluation.

mod retrieval;

pub use retrieval::{retrieval_grid, RetrievalRow, RetrievalSheet, MAX_GRID_QUERIES};

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::augment::ops::resize;
use crate::data::{DatasetSplit, VideoClip};
use crate::model::{embed, Adapters, ModelParams};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub vectors: Array2<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn new(vectors: Array2<f32>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if vectors.nrows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Eval("index rows, labels and ids differ in length".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Eval(format!("duplicate index entry `{dup}`")));
        }
        Ok(Self { vectors, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// An evaluation frame with its label and a unique id.
#[derive(Debug, Clone, Copy)]
pub struct LabeledFrame<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub clip: &'a VideoClip,
    pub frame: usize,
}

impl LabeledFrame<'_> {
    pub fn id(&self) -> String {
        format!("{}#{}", self.clip.video_id, self.frame)
    }
}

/// Middle frame of every training video.
pub fn train_frames<'a>(clips: &'a [VideoClip], split: &DatasetSplit) -> Vec<LabeledFrame<'a>> {
    split
        .train
        .iter()
        .map(|&i| {
            let clip = &clips[i];
            LabeledFrame {
                image: clip.middle_frame(),
                label: clip.class_id,
                clip,
                frame: clip.middle_index(),
            }
        })
        .collect()
}

pub fn test_frames<'a>(clips: &'a [VideoClip], split: &DatasetSplit) -> Vec<LabeledFrame<'a>> {
    split
        .test
        .iter()
        .map(|t| LabeledFrame {
            image: &clips[t.clip].frames[t.frame],
            label: t.class_id,
            clip: &clips[t.clip],
            frame: t.frame,
        })
        .collect()
}

pub const EXTRACT_CHUNK: usize = 64;

/// Class-token embeddings of frames resized to `size` (no other
/// preprocessing), computed in chunks of `chunk` frames.
pub fn extract_images(params: &ModelParams<f32>, adapters: Option<&Adapters<f32>>, images: &[&Image], size: usize, chunk: usize) -> Result<Array2<f32>> {
    if chunk == 0 {
        return Err(Error::Eval("chunk size must be >= 1".into()));
    }
    let d = params.config.embed_dim;
    let mut out = Array2::zeros((images.len(), d));
    for (ci, part) in images.chunks(chunk).enumerate() {
        let batch: Vec<Image> = part
            .iter()
            .map(|im| if im.dim().0 == size && im.dim().1 == size { (*im).clone() } else { resize(im, size) })
            .collect();
        let e = embed(params, adapters, &batch)?;
        out.slice_mut(ndarray::s![ci * chunk..ci * chunk + part.len(), ..]).assign(&e);
    }
    Ok(out)
}

pub fn extract(params: &ModelParams<f32>, adapters: Option<&Adapters<f32>>, frames: &[LabeledFrame<'_>]) -> Result<EmbeddingIndex> {
    let images: Vec<&Image> = frames.iter().map(|f| f.image).collect();
    let vectors = extract_images(params, adapters, &images, params.config.image_size, EXTRACT_CHUNK)?;
    EmbeddingIndex::new(vectors, frames.iter().map(|f| f.label).collect(), frames.iter().map(LabeledFrame::id).collect())
}

pub fn distance(a: ArrayView1<f32>, b: ArrayView1<f32>, metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in a.iter().zip(b.iter()) {
                let (x, y) = (f64::from(x), f64::from(y));
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            let denom = (aa * bb).sqrt();
            if denom == 0.0 {
                1.0
            } else {
                1.0 - ab / denom
            }
        }
    }
}

/// Indices of the `k` nearest train rows, ordered by (distance, index).
pub fn nearest(train: &EmbeddingIndex, query: ArrayView1<f32>, k: usize, metric: Metric) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = train
        .vectors
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (i, distance(r, query, metric)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// k-NN labels. `k = 1` takes the nearest neighbour (lower index on ties);
/// `k > 1` takes a majority vote, broken by the nearest member of each tied
/// class.
pub fn knn_predict(train: &EmbeddingIndex, test: &EmbeddingIndex, k: usize, metric: Metric) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Eval("k must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Eval("empty train index".into()));
    }
    if test.is_empty() {
        return Err(Error::Eval("empty test index".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Dimension(format!("index dims {} and {} differ", train.dim(), test.dim())));
    }
    Ok(test
        .vectors
        .rows()
        .into_iter()
        .map(|q| {
            let nn = nearest(train, q, k, metric);
            let mut votes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for (rank, &(i, _)) in nn.iter().enumerate() {
                let e = votes.entry(train.labels[i]).or_insert((0, rank));
                e.0 += 1;
            }
            votes
                .into_iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
                .map(|(label, _)| label)
                .expect("k >= 1")
        })
        .collect())
}

pub fn knn_accuracy(train: &EmbeddingIndex, test: &EmbeddingIndex, k: usize, metric: Metric) -> Result<f64> {
    let pred = knn_predict(train, test, k, metric)?;
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub num_train: usize,
    pub num_test: usize,
    pub k: usize,
    pub metric: Metric,
}

/// k-NN accuracy of one model on one split.
pub fn evaluate(params: &ModelParams<f32>, adapters: Option<&Adapters<f32>>, clips: &[VideoClip], split: &DatasetSplit, k: usize, metric: Metric) -> Result<EvalReport> {
    let train = extract(params, adapters, &train_frames(clips, split))?;
    let test = extract(params, adapters, &test_frames(clips, split))?;
    let pred = knn_predict(&train, &test, k, metric)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, &l) in pred.iter().zip(&test.labels) {
        let e = per.entry(l).or_default();
        e.1 += 1;
        if *p == l {
            e.0 += 1;
        }
    }
    let correct: usize = per.values().map(|v| v.0).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        per_class_accuracy: per.into_iter().map(|(c, (ok, n))| (c, ok as f64 / n as f64)).collect(),
        num_train: train.len(),
        num_test: test.len(),
        k,
        metric,
    })
}

/// Labelled clips with their split.
#[derive(Debug, Clone, Copy)]
pub struct SplitRef<'a> {
    pub clips: &'a [VideoClip],
    pub split: &'a DatasetSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingResult {
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

/// Evaluates one checkpoint on both the pretraining and the adaptation domain.
pub fn forgetting_probe(params: &ModelParams<f32>, adapters: Option<&Adapters<f32>>, source: SplitRef<'_>, target: SplitRef<'_>, k: usize, metric: Metric) -> Result<ForgettingResult> {
    Ok(ForgettingResult {
        source_accuracy: evaluate(params, adapters, source.clips, source.split, k, metric)?.accuracy,
        target_accuracy: evaluate(params, adapters, target.clips, target.split, k, metric)?.accuracy,
    })
}
