//! Object-centric video clips: procedural generation, on-disk ingestion and the
//! per-class train/test split used by the k-NN protocol.

mod io;
mod split;
mod synth;

pub use io::{load_dataset, load_frame, save_dataset, save_frame, Manifest, ManifestVideo};
pub use split::{split_dataset, DatasetSplit, TestFrame};
pub use synth::{generate_corpus, generate_video, Domain, SynthSpec, NUM_SHAPE_FAMILIES};

use sha2::{Digest, Sha256};

use crate::{Error, Image, Result};

/// An ordered sequence of frames showing one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub video_id: String,
    /// Used only for evaluation; the adaptation pipeline never reads it.
    pub class_id: usize,
    pub frames: Vec<Image>,
}

impl VideoClip {
    pub fn new(video_id: impl Into<String>, class_id: usize, frames: Vec<Image>) -> Result<Self> {
        let clip = Self {
            video_id: video_id.into(),
            class_id,
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the frame used to represent the clip at evaluation time.
    pub fn middle_index(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn middle_frame(&self) -> &Image {
        &self.frames[self.middle_index()]
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Config(format!(
                "clip `{}` has {} frame(s), need at least 2",
                self.video_id,
                self.frames.len()
            )));
        }
        let shape = self.frames[0].dim();
        for (i, f) in self.frames.iter().enumerate() {
            if f.dim() != shape {
                return Err(Error::Dimension(format!(
                    "clip `{}` frame {i} has shape {:?}, expected {:?}",
                    self.video_id,
                    f.dim(),
                    shape
                )));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Numeric(format!(
                    "clip `{}` frame {i} has values outside [0, 1]",
                    self.video_id
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the frame bytes, used in run manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.video_id.as_bytes());
        h.update((self.class_id as u64).to_le_bytes());
        for f in &self.frames {
            for v in f.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Mean absolute per-pixel difference between two frames of equal shape.
pub fn mean_l1(a: &Image, b: &Image) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum::<f64>()
        / n
}
