//! On-disk layout: `root/<class_name>/<video_id>/frame_00000.png` plus
//! `root/manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub class_name: String,
    pub video_id: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// class_name -> class_id
    pub classes: BTreeMap<String, usize>,
    pub videos: Vec<ManifestVideo>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn class_name(class_id: usize) -> String {
    format!("class_{class_id:03}")
}

pub fn save_frame(path: &Path, frame: &Image) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (frame[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_frame(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Writes clips as 8-bit PNG frames plus a manifest.
pub fn save_dataset(root: &Path, clips: &[VideoClip]) -> Result<Manifest> {
    let mut manifest = Manifest {
        classes: BTreeMap::new(),
        videos: Vec::with_capacity(clips.len()),
    };
    for clip in clips {
        let cname = class_name(clip.class_id);
        manifest.classes.insert(cname.clone(), clip.class_id);
        let dir = root.join(&cname).join(&clip.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in clip.frames.iter().enumerate() {
            save_frame(&dir.join(frame_name(i)), f)?;
        }
        manifest.videos.push(ManifestVideo {
            class_name: cname,
            video_id: clip.video_id.clone(),
            frames: clip.len(),
        });
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn ingest_err(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Reads a dataset written by [`save_dataset`] (or prepared by hand in the same
/// layout). Frames are decoded in lexicographic filename order.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoClip>> {
    let mpath = root.join(MANIFEST_FILE);
    let bytes = fs::read(&mpath).map_err(|e| ingest_err(&mpath, format!("missing manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| ingest_err(&mpath, e.to_string()))?;
    if manifest.videos.is_empty() {
        return Err(ingest_err(&mpath, "manifest lists no videos"));
    }
    let mut clips = Vec::with_capacity(manifest.videos.len());
    for v in &manifest.videos {
        let class_id = *manifest
            .classes
            .get(&v.class_name)
            .ok_or_else(|| ingest_err(&mpath, format!("unknown class `{}`", v.class_name)))?;
        let dir = root.join(&v.class_name).join(&v.video_id);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| ingest_err(&dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.len() < 2 {
            return Err(ingest_err(&dir, format!("{} frame(s), need at least 2", files.len())));
        }
        if files.len() != v.frames {
            return Err(ingest_err(
                &dir,
                format!("manifest says {} frames, found {}", v.frames, files.len()),
            ));
        }
        let frames = files.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?;
        let clip = VideoClip {
            video_id: v.video_id.clone(),
            class_id,
            frames,
        };
        clip.validate().map_err(|e| ingest_err(&dir, e.to_string()))?;
        clips.push(clip);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_video, Domain, SynthSpec};

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }), "{err}");
    }

    #[test]
    fn reads_hand_made_layout() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("mug").join("vid_a");
        fs::create_dir_all(&vdir).unwrap();
        for i in 0..5 {
            let f = Array3::from_elem((8, 8, 3), i as f32 / 255.0);
            save_frame(&vdir.join(frame_name(i)), &f).unwrap();
        }
        let manifest = Manifest {
            classes: [("mug".to_string(), 0)].into_iter().collect(),
            videos: vec![ManifestVideo {
                class_name: "mug".into(),
                video_id: "vid_a".into(),
                frames: 5,
            }],
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&manifest).unwrap()).unwrap();
        let clips = load_dataset(dir.path()).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].len(), 5);
        assert_eq!(clips[0].frames[3][[0, 0, 0]], 3.0 / 255.0);
    }

    #[test]
    fn single_frame_video_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("a").join("v");
        fs::create_dir_all(&vdir).unwrap();
        save_frame(&vdir.join(frame_name(0)), &Array3::zeros((4, 4, 3))).unwrap();
        let manifest = Manifest {
            classes: [("a".to_string(), 0)].into_iter().collect(),
            videos: vec![ManifestVideo {
                class_name: "a".into(),
                video_id: "v".into(),
                frames: 1,
            }],
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn generate_save_load_is_bit_identical() {
        let spec = SynthSpec {
            num_classes: 2,
            videos_per_class: 1,
            frames_per_video: 3,
            image_size: 16,
            domain: Domain::Target,
            seed: 3,
        };
        let clips = vec![
            generate_video(&spec, 0, 10).unwrap(),
            generate_video(&spec, 1, 11).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &clips).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, clips);
    }
}
