//! Deterministic image operations. All randomness lives in the parameter
//! structs; these functions are pure.

use ndarray::{Array3, Axis};

use crate::Image;

/// Integer crop rectangle, always inside the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.top + self.height <= h && self.left + self.width <= w
    }
}

fn sample_bilinear(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| f64::from(img[[yy, xx, c]]);
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crops `b` and resizes it to `out x out` with half-pixel-centre bilinear
/// sampling.
pub fn crop_resize(img: &Image, b: CropBox, out: usize) -> Image {
    let (_, _, ch) = img.dim();
    let sy = b.height as f64 / out as f64;
    let sx = b.width as f64 / out as f64;
    Array3::from_shape_fn((out, out, ch), |(i, j, c)| {
        let y = (b.top as f64 + (i as f64 + 0.5) * sy - 0.5)
            .clamp(b.top as f64, (b.top + b.height - 1) as f64);
        let x = (b.left as f64 + (j as f64 + 0.5) * sx - 0.5)
            .clamp(b.left as f64, (b.left + b.width - 1) as f64);
        sample_bilinear(img, y, x, c) as f32
    })
}

pub fn resize(img: &Image, out: usize) -> Image {
    let (h, w, _) = img.dim();
    if h == out && w == out {
        return img.clone();
    }
    crop_resize(img, CropBox::full(h, w), out)
}

pub fn hflip(img: &mut Image) {
    img.invert_axis(Axis(1));
    *img = img.as_standard_layout().into_owned();
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn grayscale(img: &mut Image) {
    for mut px in img.lanes_mut(Axis(2)) {
        let l = luma(px[0], px[1], px[2]);
        px.fill(l);
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f32) {
    img.mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
}

pub fn adjust_contrast(img: &mut Image, factor: f32) {
    let n = (img.len() / 3) as f32;
    let mean = img
        .lanes(Axis(2))
        .into_iter()
        .map(|p| luma(p[0], p[1], p[2]))
        .sum::<f32>()
        / n;
    img.mapv_inplace(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0));
}

pub fn adjust_saturation(img: &mut Image, factor: f32) {
    for mut px in img.lanes_mut(Axis(2)) {
        let l = luma(px[0], px[1], px[2]);
        px.mapv_inplace(|v| ((v - l) * factor + l).clamp(0.0, 1.0));
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &mut Image, shift: f32) {
    for mut px in img.lanes_mut(Axis(2)) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

/// Kernel width for a given sigma: `ceil(4 sigma)` rounded up to odd.
pub fn blur_kernel_size(sigma: f64) -> usize {
    let k = (4.0 * sigma).ceil().max(1.0) as usize;
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &mut Image, sigma: f64) {
    let size = blur_kernel_size(sigma);
    if size == 1 {
        return;
    }
    let r = (size / 2) as isize;
    let mut kernel: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (h, w, ch) = img.dim();
    let pass = |src: &Image, horizontal: bool| {
        Array3::from_shape_fn((h, w, ch), |(y, x, c)| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| {
                    let o = k as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                    };
                    wt * src[[yy, xx, c]]
                })
                .sum::<f32>()
                .clamp(0.0, 1.0)
        })
    };
    let tmp = pass(img, true);
    *img = pass(&tmp, false);
}

pub fn solarize(img: &mut Image, threshold: f32) {
    img.mapv_inplace(|v| if v >= threshold { 1.0 - v } else { v });
}

/// Affine warp about the image centre: the content is scaled by `scale`,
/// rotated by `rot_deg` and then shifted by `(dx, dy)` pixels. Out-of-frame
/// samples replicate the border.
pub fn affine_warp(img: &Image, dx: f64, dy: f64, rot_deg: f64, scale: f64) -> Image {
    let (h, w, ch) = img.dim();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = rot_deg.to_radians().sin_cos();
    Array3::from_shape_fn((h, w, ch), |(i, j, c)| {
        // Inverse map from output pixel centre to source pixel centre.
        let ox = j as f64 + 0.5 - cx - dx;
        let oy = i as f64 + 0.5 - cy - dy;
        let sx = (cos * ox + sin * oy) / scale;
        let sy = (-sin * ox + cos * oy) / scale;
        sample_bilinear(img, sy + cy - 0.5, sx + cx - 0.5, c) as f32
    })
}
