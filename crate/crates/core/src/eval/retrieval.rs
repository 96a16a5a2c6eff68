use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{nearest, EmbeddingIndex, Metric};
use crate::augment::ops::resize;
use crate::{Error, Image, Result};

pub const MAX_GRID_QUERIES: usize = 16;
const BORDER: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub query_id: String,
    pub query_label: usize,
    pub neighbor_ids: Vec<String>,
    pub neighbor_labels: Vec<usize>,
    pub distances: Vec<f64>,
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSheet {
    pub metric: Metric,
    pub top_k: usize,
    pub rows: Vec<RetrievalRow>,
}

fn paste(canvas: &mut RgbImage, img: &Image, x0: u32, y0: u32, tile: u32, border: Option<Rgb<u8>>) {
    let img = if img.dim().0 as u32 == tile && img.dim().1 as u32 == tile { img.clone() } else { resize(img, tile as usize) };
    let full = tile + 2 * BORDER;
    if let Some(c) = border {
        for y in 0..full {
            for x in 0..full {
                canvas.put_pixel(x0 + x, y0 + y, c);
            }
        }
    }
    for y in 0..tile {
        for x in 0..tile {
            let px = |ch| (img[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.put_pixel(x0 + BORDER + x, y0 + BORDER + y, Rgb([px(0), px(1), px(2)]));
        }
    }
}

/// Top-`top_k` neighbours of up to 16 queries, written as a contact sheet
/// (query, then neighbours framed green when the label matches, red
/// otherwise) plus a JSON sidecar next to it.
pub fn retrieval_grid(
    train: &EmbeddingIndex,
    train_images: &[&Image],
    queries: &EmbeddingIndex,
    query_images: &[&Image],
    top_k: usize,
    metric: Metric,
    png_path: Option<&Path>,
) -> Result<RetrievalSheet> {
    if top_k == 0 || train.is_empty() {
        return Err(Error::Eval("retrieval needs top_k >= 1 and a non-empty index".into()));
    }
    if train_images.len() != train.len() || query_images.len() != queries.len() {
        return Err(Error::Eval("image lists do not match their indices".into()));
    }
    let n_q = queries.len().min(MAX_GRID_QUERIES);
    let rows: Vec<RetrievalRow> = (0..n_q)
        .map(|qi| {
            let nn = nearest(train, queries.vectors.row(qi), top_k, metric);
            let ql = queries.labels[qi];
            RetrievalRow {
                query_id: queries.ids[qi].clone(),
                query_label: ql,
                neighbor_ids: nn.iter().map(|&(i, _)| train.ids[i].clone()).collect(),
                neighbor_labels: nn.iter().map(|&(i, _)| train.labels[i]).collect(),
                distances: nn.iter().map(|&(_, d)| d).collect(),
                correct: nn.iter().map(|&(i, _)| train.labels[i] == ql).collect(),
            }
        })
        .collect();
    let sheet = RetrievalSheet { metric, top_k, rows };
    if let Some(path) = png_path {
        let tile = query_images.first().map_or(32, |im| im.dim().0 as u32);
        let cell = tile + 2 * BORDER;
        let cols = 1 + top_k as u32;
        let mut canvas: RgbImage = ImageBuffer::from_pixel(cols * cell, n_q.max(1) as u32 * cell, Rgb([255, 255, 255]));
        for (r, row) in sheet.rows.iter().enumerate() {
            let y = r as u32 * cell;
            paste(&mut canvas, query_images[r], 0, y, tile, None);
            for (c, id) in row.neighbor_ids.iter().enumerate() {
                let idx = train.ids.iter().position(|t| t == id).expect("neighbour id from index");
                let color = if row.correct[c] { Rgb([0, 200, 0]) } else { Rgb([220, 0, 0]) };
                paste(&mut canvas, train_images[idx], (c as u32 + 1) * cell, y, tile, Some(color));
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        canvas.save(path).map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&sheet)?).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(sheet)
}
