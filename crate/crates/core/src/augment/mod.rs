//! Paired-view augmentation: two distinct global-view pipelines, paired local
//! crops, and the motion-simulating transform used by the static baseline.

pub mod ops;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sampler::RawBatch;
use crate::seed::{self, Rng};
use crate::{Error, Image, Result};
use ops::CropBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub global_size: usize,
    pub local_size: usize,
    pub num_local_pairs: usize,
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub view1_blur_prob: f64,
    pub view2_blur_prob: f64,
    pub local_blur_prob: f64,
    pub solarize_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_threshold: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.25),
            global_size: 64,
            local_size: 32,
            num_local_pairs: 2,
            flip_prob: 0.5,
            jitter_strength: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            view1_blur_prob: 1.0,
            view2_blur_prob: 0.1,
            local_blur_prob: 0.5,
            solarize_prob: 0.2,
            blur_sigma: (0.1, 2.0),
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Full-resolution setting: 224 global views, 96 local crops.
    pub fn reference() -> Self {
        Self {
            global_size: 224,
            local_size: 96,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(0.0 < lo && lo < hi && hi <= 1.0) {
                return Err(Error::field(name, "must satisfy 0 < lo < hi <= 1"));
            }
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::field("global_size", "crop sizes must be positive"));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("view1_blur_prob", self.view1_blur_prob),
            ("view2_blur_prob", self.view2_blur_prob),
            ("local_blur_prob", self.local_blur_prob),
            ("solarize_prob", self.solarize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::field(name, "probability must be in [0, 1]"));
            }
        }
        let (slo, shi) = self.blur_sigma;
        if !(0.0 < slo && slo <= shi) {
            return Err(Error::field("blur_sigma", "must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// Multiplicative factors and hue shift, applied in `order`
/// (0 brightness, 1 contrast, 2 saturation, 3 hue).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub order: [u8; 4],
}

impl Jitter {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [0, 1, 2, 3],
        }
    }

    fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let s = cfg.jitter_strength;
        let mut factor = |mag: f64| {
            let m = mag * s;
            rng.random_range((1.0 - m).max(0.0)..=1.0 + m) as f32
        };
        let brightness = factor(cfg.brightness);
        let contrast = factor(cfg.contrast);
        let saturation = factor(cfg.saturation);
        let h = cfg.hue * s;
        let hue = rng.random_range(-h..=h) as f32;
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        Self {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }

    fn apply(&self, img: &mut Image) {
        for op in self.order {
            match op {
                0 if self.brightness != 1.0 => ops::adjust_brightness(img, self.brightness),
                1 if self.contrast != 1.0 => ops::adjust_contrast(img, self.contrast),
                2 if self.saturation != 1.0 => ops::adjust_saturation(img, self.saturation),
                3 if self.hue != 0.0 => ops::adjust_hue(img, self.hue),
                _ => {}
            }
        }
    }
}

/// Every random decision of one view, drawn up front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub crop: CropBox,
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

/// Random-resized-crop geometry: area fraction in `scale`, aspect ratio
/// log-uniform in `[3/4, 4/3]`, ten attempts before a centred fallback.
pub fn sample_crop(h: usize, w: usize, scale: (f64, f64), rng: &mut Rng) -> CropBox {
    let area = (h * w) as f64;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let side = h.min(w);
    CropBox {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
    }
}

fn sample_blur(p: f64, cfg: &AugmentConfig, rng: &mut Rng) -> Option<f64> {
    rng.random_bool(p)
        .then(|| rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1))
}

pub fn sample_view_1(frame: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> ViewParams {
    let (h, w, _) = frame.dim();
    ViewParams {
        crop: sample_crop(h, w, cfg.global_scale, rng),
        flip: rng.random_bool(cfg.flip_prob),
        jitter: Some(Jitter::sample(cfg, rng)),
        grayscale: rng.random_bool(cfg.grayscale_prob),
        blur_sigma: sample_blur(cfg.view1_blur_prob, cfg, rng),
        solarize: false,
    }
}

pub fn sample_view_2(frame: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> ViewParams {
    let (h, w, _) = frame.dim();
    ViewParams {
        crop: sample_crop(h, w, cfg.global_scale, rng),
        flip: rng.random_bool(cfg.flip_prob),
        jitter: Some(Jitter::sample(cfg, rng)),
        grayscale: rng.random_bool(cfg.grayscale_prob),
        blur_sigma: sample_blur(cfg.view2_blur_prob, cfg, rng),
        solarize: rng.random_bool(cfg.solarize_prob),
    }
}

/// Local crops carry no flip.
pub fn sample_local(frame: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> ViewParams {
    let (h, w, _) = frame.dim();
    ViewParams {
        crop: sample_crop(h, w, cfg.local_scale, rng),
        flip: false,
        jitter: Some(Jitter::sample(cfg, rng)),
        grayscale: rng.random_bool(cfg.grayscale_prob),
        blur_sigma: sample_blur(cfg.local_blur_prob, cfg, rng),
        solarize: false,
    }
}

pub fn apply_view(frame: &Image, p: &ViewParams, out: usize, solarize_threshold: f32) -> Image {
    let mut img = ops::crop_resize(frame, p.crop, out);
    if p.flip {
        ops::hflip(&mut img);
    }
    if let Some(j) = p.jitter {
        j.apply(&mut img);
    }
    if p.grayscale {
        ops::grayscale(&mut img);
    }
    if let Some(sigma) = p.blur_sigma {
        ops::gaussian_blur(&mut img, sigma);
    }
    if p.solarize {
        ops::solarize(&mut img, solarize_threshold);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn check_frame(frame: &Image) -> Result<()> {
    let (h, w, c) = frame.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::Dimension(format!("malformed frame {:?}", frame.dim())));
    }
    Ok(())
}

/// Crop in `global_scale`, flip, jitter, grayscale, blur with probability 1.
pub fn global_view_1(frame: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    check_frame(frame)?;
    let p = sample_view_1(frame, cfg, rng);
    Ok(apply_view(frame, &p, cfg.global_size, cfg.solarize_threshold))
}

/// As view 1 with blur probability 0.1 and solarization probability 0.2.
pub fn global_view_2(frame: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    check_frame(frame)?;
    let p = sample_view_2(frame, cfg, rng);
    Ok(apply_view(frame, &p, cfg.global_size, cfg.solarize_threshold))
}

/// One small crop from each frame, independently transformed.
pub fn local_crop_pair(
    frame_a: &Image,
    frame_b: &Image,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Image, Image)> {
    check_frame(frame_a)?;
    check_frame(frame_b)?;
    let pa = sample_local(frame_a, cfg, rng);
    let pb = sample_local(frame_b, cfg, rng);
    Ok((
        apply_view(frame_a, &pa, cfg.local_size, cfg.solarize_threshold),
        apply_view(frame_b, &pb, cfg.local_size, cfg.solarize_threshold),
    ))
}

/// Camera-motion-like perturbation magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    /// Fraction of width / height.
    pub translate: (f64, f64),
    pub rotation_deg: f64,
    pub scale: f64,
    pub brightness: f32,
    pub contrast: f32,
}

impl MotionParams {
    pub fn identity() -> Self {
        Self {
            translate: (0.0, 0.0),
            rotation_deg: 0.0,
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            translate: (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)),
            rotation_deg: rng.random_range(-10.0..=10.0),
            scale: rng.random_range(0.95..=1.05),
            brightness: rng.random_range(-0.1..=0.1),
            contrast: rng.random_range(0.9..=1.1),
        }
    }
}

pub fn apply_motion(frame: &Image, p: &MotionParams) -> Image {
    let (h, w, _) = frame.dim();
    let mut out = ops::affine_warp(
        frame,
        p.translate.0 * w as f64,
        p.translate.1 * h as f64,
        p.rotation_deg,
        p.scale,
    );
    if p.brightness != 0.0 {
        out.mapv_inplace(|v| (v + p.brightness).clamp(0.0, 1.0));
    }
    if p.contrast != 1.0 {
        ops::adjust_contrast(&mut out, p.contrast);
    }
    out
}

/// Translation up to 10%, rotation up to 10 degrees, scale in [0.95, 1.05],
/// brightness shift up to 0.1, contrast in [0.9, 1.1].
pub fn motion_sim(frame: &Image, rng: &mut Rng) -> Result<Image> {
    check_frame(frame)?;
    Ok(apply_motion(frame, &MotionParams::sample(rng)))
}

/// Where the second global view comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    /// `frame_b` is the later frame of the temporal pair.
    #[default]
    Video,
    /// Both views come from the first frame of the pair.
    Static,
    /// Static, with the motion-simulating transform applied to the second view.
    StaticMotion,
}

#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub global_a: Image,
    pub global_b: Image,
    pub locals: Vec<(Image, Image)>,
}

#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub pairs: Vec<AugmentedPair>,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_local_pairs(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.locals.len())
    }
}

/// Augments each pair with its own stream derived from `(batch_seed, k)`.
pub fn augment_batch(
    raw: &RawBatch<'_>,
    cfg: &AugmentConfig,
    source: ViewSource,
    batch_seed: u64,
) -> Result<AugmentedBatch> {
    cfg.validate()?;
    let pairs = raw
        .pairs
        .par_iter()
        .enumerate()
        .map(|(k, pair)| {
            let mut rng = seed::rng(batch_seed, &[k as u64]);
            let frame_a = pair.frame_a();
            let moved;
            let frame_b = match source {
                ViewSource::Video => pair.frame_b(),
                ViewSource::Static => frame_a,
                ViewSource::StaticMotion => {
                    moved = motion_sim(frame_a, &mut rng)?;
                    &moved
                }
            };
            let global_a = global_view_1(frame_a, cfg, &mut rng)?;
            let global_b = global_view_2(frame_b, cfg, &mut rng)?;
            let locals = (0..cfg.num_local_pairs)
                .map(|_| local_crop_pair(frame_a, frame_b, cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(AugmentedPair {
                global_a,
                global_b,
                locals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoClip;
    use crate::sampler::FramePair;
    use ndarray::Array3;

    fn noise_frame(h: usize, w: usize, s: u64) -> Image {
        let mut rng = seed::rng(s, &[]);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
    }

    #[test]
    fn identity_limit_equals_resized_crop() {
        let frame = noise_frame(40, 48, 1);
        let crop = CropBox {
            top: 3,
            left: 5,
            height: 30,
            width: 33,
        };
        let p = ViewParams {
            crop,
            flip: false,
            jitter: Some(Jitter::identity()),
            grayscale: false,
            blur_sigma: Some(0.1),
            solarize: false,
        };
        let out = apply_view(&frame, &p, 24, 0.5);
        assert_eq!(out, ops::crop_resize(&frame, crop, 24));
    }

    #[test]
    fn views_are_deterministic_and_shaped() {
        let cfg = AugmentConfig::default();
        let frame = noise_frame(50, 70, 2);
        let a = global_view_1(&frame, &cfg, &mut seed::rng(9, &[])).unwrap();
        let b = global_view_1(&frame, &cfg, &mut seed::rng(9, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (64, 64, 3));
        let c = global_view_2(&frame, &cfg, &mut seed::rng(9, &[])).unwrap();
        assert_eq!(c.dim(), (64, 64, 3));
        assert!(a.iter().chain(c.iter()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn flip_and_blur_frequencies() {
        let cfg = AugmentConfig::default();
        let frame = noise_frame(32, 32, 0);
        let mut rng = seed::rng(3, &[]);
        let n = 10_000;
        let (mut flips, mut blur2, mut blur1) = (0, 0, 0);
        for _ in 0..n {
            let p1 = sample_view_1(&frame, &cfg, &mut rng);
            flips += usize::from(p1.flip);
            blur1 += usize::from(p1.blur_sigma.is_some());
            let p2 = sample_view_2(&frame, &cfg, &mut rng);
            blur2 += usize::from(p2.blur_sigma.is_some());
        }
        let f = flips as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "flip {f}");
        let b = blur2 as f64 / n as f64;
        assert!((b - 0.1).abs() < 0.01, "blur {b}");
        assert_eq!(blur1, n);
    }

    #[test]
    fn blur_sigma_range_and_solarize_rate() {
        let cfg = AugmentConfig::default();
        let frame = noise_frame(16, 16, 0);
        let mut rng = seed::rng(4, &[]);
        let mut sol = 0;
        for _ in 0..5000 {
            let p = sample_view_2(&frame, &cfg, &mut rng);
            sol += usize::from(p.solarize);
            let p1 = sample_view_1(&frame, &cfg, &mut rng);
            let s = p1.blur_sigma.unwrap();
            assert!((0.1..=2.0).contains(&s));
        }
        assert!((sol as f64 / 5000.0 - 0.2).abs() < 0.02);
    }

    #[test]
    fn constant_gray_stays_constant_without_jitter() {
        let cfg = AugmentConfig::default();
        let frame = Array3::from_elem((40, 40, 3), 0.5f32);
        let mut rng = seed::rng(5, &[]);
        for _ in 0..50 {
            let mut p = sample_view_2(&frame, &cfg, &mut rng);
            p.jitter = None;
            let out = apply_view(&frame, &p, 32, cfg.solarize_threshold);
            let first = out[[0, 0, 0]];
            assert!(out.iter().all(|&v| (v - first).abs() < 1e-6));
        }
    }

    #[test]
    fn crops_stay_in_bounds() {
        let mut rng = seed::rng(6, &[]);
        for &(h, w) in &[(64, 64), (17, 90), (100, 20)] {
            for _ in 0..2000 {
                let g = sample_crop(h, w, (0.4, 1.0), &mut rng);
                let l = sample_crop(h, w, (0.05, 0.25), &mut rng);
                assert!(g.fits(h, w) && l.fits(h, w), "{g:?} {l:?}");
            }
        }
    }

    #[test]
    fn reference_local_size_is_96() {
        let cfg = AugmentConfig::reference();
        let f = noise_frame(120, 120, 7);
        let (a, b) = local_crop_pair(&f, &f, &cfg, &mut seed::rng(1, &[])).unwrap();
        assert_eq!(a.dim(), (96, 96, 3));
        assert_eq!(b.dim(), (96, 96, 3));
    }

    #[test]
    fn motion_rotation_bounded() {
        let mut rng = seed::rng(8, &[]);
        for _ in 0..1000 {
            let p = MotionParams::sample(&mut rng);
            assert!(p.rotation_deg.abs() <= 10.0);
            assert!(p.translate.0.abs() <= 0.1 && p.translate.1.abs() <= 0.1);
            assert!((0.95..=1.05).contains(&p.scale));
            assert!((0.9..=1.1).contains(&p.contrast));
        }
        let f = noise_frame(20, 20, 1);
        assert_eq!(apply_motion(&f, &MotionParams::identity()), f);
    }

    fn clip() -> VideoClip {
        let frames = (0..6).map(|i| noise_frame(48, 48, i)).collect();
        VideoClip::new("v", 0, frames).unwrap()
    }

    #[test]
    fn batch_shapes_and_local_count() {
        let c = clip();
        let raw = RawBatch {
            pairs: vec![
                FramePair {
                    clip_index: 0,
                    clip: &c,
                    t: 1,
                    delta: 3,
                };
                3
            ],
        };
        let mut cfg = AugmentConfig::default();
        let b = augment_batch(&raw, &cfg, ViewSource::Video, 1).unwrap();
        assert_eq!(b.len(), 3);
        for p in &b.pairs {
            assert_eq!(p.global_a.dim(), (64, 64, 3));
            assert_eq!(p.locals.len(), 2);
            assert_eq!(p.locals[0].0.dim(), (32, 32, 3));
        }
        cfg.num_local_pairs = 0;
        let b = augment_batch(&raw, &cfg, ViewSource::Video, 1).unwrap();
        assert!(b.pairs.iter().all(|p| p.locals.is_empty()));
    }

    #[test]
    fn static_mode_uses_first_frame_for_both_views() {
        let c = clip();
        let raw = RawBatch {
            pairs: vec![FramePair {
                clip_index: 0,
                clip: &c,
                t: 2,
                delta: 3,
            }],
        };
        let cfg = AugmentConfig::default();
        let st = augment_batch(&raw, &cfg, ViewSource::Static, 4).unwrap();
        // Replaying the same stream on the first frame reproduces view b.
        let mut rng = seed::rng(4, &[0]);
        let _ = global_view_1(&c.frames[1], &cfg, &mut rng).unwrap();
        let b = global_view_2(&c.frames[1], &cfg, &mut rng).unwrap();
        assert_eq!(st.pairs[0].global_b, b);
        let vid = augment_batch(&raw, &cfg, ViewSource::Video, 4).unwrap();
        assert_eq!(vid.pairs[0].global_a, st.pairs[0].global_a);
        assert_ne!(vid.pairs[0].global_b, st.pairs[0].global_b);
    }
}
