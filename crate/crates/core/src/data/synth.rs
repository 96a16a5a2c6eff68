use std::f64::consts::PI;

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::seed;
use crate::{Error, Image, Result};

/// Number of distinct procedural shape families; one per class.
pub const NUM_SHAPE_FAMILIES: usize = 10;

/// Appearance family of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Flat backgrounds, solid fills.
    Source,
    /// Textured backgrounds, patterned fills.
    Target,
}

impl Domain {
    fn code(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            videos_per_class: 32,
            frames_per_video: 24,
            image_size: 64,
            domain: Domain::Source,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > NUM_SHAPE_FAMILIES {
            return Err(Error::field(
                "num_classes",
                format!("must be in 1..={NUM_SHAPE_FAMILIES}"),
            ));
        }
        if self.videos_per_class == 0 {
            return Err(Error::field("videos_per_class", "must be >= 1"));
        }
        if self.frames_per_video < 2 {
            return Err(Error::field("frames_per_video", "must be >= 2"));
        }
        if self.image_size < 16 {
            return Err(Error::field("image_size", "must be >= 16"));
        }
        Ok(())
    }

    /// Seed of instance `index` of class `class_id`.
    pub fn instance_seed(&self, class_id: usize, index: usize) -> u64 {
        seed::derive(
            self.seed,
            &[self.domain.code(), class_id as u64, index as u64],
        )
    }
}

#[derive(Debug, Clone, Copy)]
enum Fill {
    Solid,
    Stripes { freq: f64, angle: f64 },
    Checker { freq: f64 },
    Dots { freq: f64 },
}

#[derive(Debug, Clone)]
enum Background {
    Flat([f64; 3]),
    Texture {
        low: [f64; 3],
        high: [f64; 3],
        // (fx, fy, phase, amplitude) in cycles per image
        gratings: Vec<(f64, f64, f64, f64)>,
        pan: (f64, f64),
    },
}

/// Everything random about one instance, drawn once from its seed.
#[derive(Debug, Clone)]
struct Instance {
    family: usize,
    color: [f64; 3],
    color2: [f64; 3],
    fill: Fill,
    background: Background,
    radius: f64,
    theta0: f64,
    theta_span: f64,
    yaw0: f64,
    yaw_span: f64,
    pos0: (f64, f64),
    drift: (f64, f64),
    scale_drift: f64,
    light0: f64,
    light_span: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Instance {
    fn draw(family: usize, domain: Domain, size: f64, rng: &mut seed::Rng) -> Self {
        let obj_v = rng.random_range(0.45..1.0);
        let color = hsv(rng.random(), rng.random_range(0.35..1.0), obj_v);
        let color2 = hsv(rng.random(), rng.random_range(0.2..1.0), rng.random_range(0.1..0.9));
        let bg_v = if obj_v > 0.65 {
            rng.random_range(0.05..obj_v - 0.3)
        } else {
            rng.random_range(obj_v + 0.3..1.0)
        };
        let (fill, background) = match domain {
            Domain::Source => (
                Fill::Solid,
                Background::Flat(hsv(rng.random(), rng.random_range(0.0..0.3), bg_v)),
            ),
            Domain::Target => {
                let fill = match rng.random_range(0..3) {
                    0 => Fill::Stripes {
                        freq: rng.random_range(2.0..4.0),
                        angle: rng.random_range(0.0..PI),
                    },
                    1 => Fill::Checker {
                        freq: rng.random_range(1.5..3.0),
                    },
                    _ => Fill::Dots {
                        freq: rng.random_range(2.0..3.5),
                    },
                };
                let n = rng.random_range(2..=3);
                let gratings = (0..n)
                    .map(|_| {
                        let f = rng.random_range(2.0..7.0);
                        let a = rng.random_range(0.0..PI);
                        (
                            f * a.cos(),
                            f * a.sin(),
                            rng.random_range(0.0..2.0 * PI),
                            rng.random_range(0.5..1.0),
                        )
                    })
                    .collect();
                let low = hsv(rng.random(), rng.random_range(0.1..0.6), (bg_v - 0.2).max(0.0));
                let high = hsv(rng.random(), rng.random_range(0.1..0.6), (bg_v + 0.2).min(1.0));
                let background = Background::Texture {
                    low,
                    high,
                    gratings,
                    pan: (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                };
                (fill, background)
            }
        };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        Self {
            family,
            color,
            color2,
            fill,
            background,
            radius: size * rng.random_range(0.26..0.34),
            theta0: rng.random_range(-0.2 * PI..0.2 * PI),
            theta_span: sign * rng.random_range(0.15 * PI..0.35 * PI),
            yaw0: rng.random_range(0.0..2.0 * PI),
            yaw_span: rng.random_range(0.3 * PI..0.8 * PI),
            pos0: (
                size * (0.5 + rng.random_range(-0.1..0.1)),
                size * (0.5 + rng.random_range(-0.1..0.1)),
            ),
            drift: (
                size * rng.random_range(-0.12..0.12),
                size * rng.random_range(-0.12..0.12),
            ),
            scale_drift: rng.random_range(-0.25..0.25),
            light0: rng.random_range(0.85..1.1),
            light_span: rng.random_range(-0.3..0.3),
        }
    }

    fn fill_color(&self, x: f64, y: f64) -> [f64; 3] {
        let w = match self.fill {
            Fill::Solid => 0.0,
            Fill::Stripes { freq, angle } => {
                let s = (PI * freq * (x * angle.cos() + y * angle.sin())).sin();
                (0.5 + 2.0 * s).clamp(0.0, 1.0)
            }
            Fill::Checker { freq } => {
                let s = (PI * freq * x).sin() * (PI * freq * y).sin();
                (0.5 + 2.0 * s).clamp(0.0, 1.0)
            }
            Fill::Dots { freq } => {
                let fx = (freq * x).rem_euclid(1.0) - 0.5;
                let fy = (freq * y).rem_euclid(1.0) - 0.5;
                if fx * fx + fy * fy < 0.09 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        [0, 1, 2].map(|c| self.color[c] * (1.0 - w) + self.color2[c] * w)
    }

    fn background_color(&self, x: f64, y: f64, tau: f64) -> [f64; 3] {
        match &self.background {
            Background::Flat(c) => *c,
            Background::Texture {
                low,
                high,
                gratings,
                pan,
            } => {
                let (xs, ys) = (x + pan.0 * tau, y + pan.1 * tau);
                let total: f64 = gratings.iter().map(|g| g.3).sum();
                let g: f64 = gratings
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (2.0 * PI * (fx * xs + fy * ys) + ph).sin())
                    .sum::<f64>()
                    / total;
                let w = 0.5 + 0.5 * g;
                [0, 1, 2].map(|c| low[c] * (1.0 - w) + high[c] * w)
            }
        }
    }
}

/// Signed distance (negative inside) of shape `family` in object coordinates
/// where the shape spans roughly the unit disc.
fn shape_sdf(family: usize, x: f64, y: f64) -> f64 {
    let rho = x.hypot(y);
    let alpha = y.atan2(x);
    let polygon = |n: f64| {
        let sector = 2.0 * PI / n;
        let beta = alpha.rem_euclid(sector) - sector / 2.0;
        rho * beta.cos() - (PI / n).cos()
    };
    let star = |k: f64, inner: f64| {
        let sector = 2.0 * PI / k;
        let a = alpha.rem_euclid(sector) / sector;
        let r = inner + (1.0 - inner) * (2.0 * a - 1.0).abs();
        (rho - r) * 0.6
    };
    let boxed = |hx: f64, hy: f64| {
        let dx = x.abs() - hx;
        let dy = y.abs() - hy;
        dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
    };
    match family {
        0 => (x.hypot(y / 0.55) - 1.0) * 0.55,
        1 => polygon(3.0),
        2 => boxed(0.8, 0.8),
        3 => star(5.0, 0.42),
        4 => (rho - 0.72).abs() - 0.28,
        5 => boxed(0.95, 0.3).min(boxed(0.3, 0.95)),
        6 => (rho - 1.0).max(-((x - 0.45).hypot(y) - 0.75)),
        7 => star(8.0, 0.68),
        8 => (rho - 1.0).max(-y - 0.1),
        _ => polygon(6.0),
    }
}

/// Rounds to the nearest 8-bit level so frames survive a PNG round trip exactly.
pub(crate) fn quantize(v: f64) -> f32 {
    f32::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0
}

/// Renders one clip. Class picks the shape family; `instance_seed` picks color,
/// texture, size and the motion trajectory.
pub fn generate_video(spec: &SynthSpec, class_id: usize, instance_seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    if class_id >= spec.num_classes {
        return Err(Error::field(
            "class_id",
            format!("{class_id} out of range for {} classes", spec.num_classes),
        ));
    }
    let size = spec.image_size;
    let sizef = size as f64;
    let mut rng = seed::rng(instance_seed, &[0]);
    let inst = Instance::draw(class_id, spec.domain, sizef, &mut rng);
    let noise = Normal::new(0.0, 0.012).expect("valid sigma");
    let t_count = spec.frames_per_video;

    let frames = (0..t_count)
        .map(|t| {
            let tau = t as f64 / (t_count - 1) as f64;
            let theta = inst.theta0 + inst.theta_span * tau;
            let yaw = inst.yaw0 + inst.yaw_span * tau;
            let squash = 1.0 - 0.3 * (1.0 - yaw.cos().abs());
            let shade = 0.8 + 0.2 * yaw.cos();
            let scale = 1.0 + inst.scale_drift * (tau - 0.5);
            let cx = inst.pos0.0 + inst.drift.0 * (tau - 0.5);
            let cy = inst.pos0.1 + inst.drift.1 * (tau - 0.5);
            let light = inst.light0 + inst.light_span * (tau - 0.5);
            let r = inst.radius * scale;
            let (st, ct) = theta.sin_cos();
            let mut img = Array3::<f32>::zeros((size, size, 3));
            for py in 0..size {
                for px in 0..size {
                    let dx = px as f64 + 0.5 - cx;
                    let dy = py as f64 + 0.5 - cy;
                    let u = ct * dx + st * dy;
                    let v = -st * dx + ct * dy;
                    let x = u / (r * squash);
                    let y = v / r;
                    let sdf_px = shape_sdf(inst.family, x, y) * r * squash;
                    let cover = (0.5 - sdf_px).clamp(0.0, 1.0);
                    let bg = inst.background_color(px as f64 / sizef, py as f64 / sizef, tau);
                    let fg = if cover > 0.0 {
                        inst.fill_color(x, y).map(|c| c * shade)
                    } else {
                        [0.0; 3]
                    };
                    for c in 0..3 {
                        let val = light * (cover * fg[c] + (1.0 - cover) * bg[c])
                            + noise.sample(&mut rng);
                        img[[py, px, c]] = quantize(val);
                    }
                }
            }
            img
        })
        .collect::<Vec<Image>>();

    VideoClip::new(
        format!("{}-c{class_id:02}-{instance_seed:016x}", spec.domain.tag()),
        class_id,
        frames,
    )
}

/// Generates `num_classes * videos_per_class` clips, class-major. Each clip
/// depends only on `(seed, domain, class, index)`, so the parallel map is
/// identical to a serial one.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Vec<VideoClip>> {
    spec.validate()?;
    (0..spec.num_classes * spec.videos_per_class)
        .into_par_iter()
        .map(|k| {
            let class_id = k / spec.videos_per_class;
            let index = k % spec.videos_per_class;
            generate_video(spec, class_id, spec.instance_seed(class_id, index))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mean_l1;

    fn spec(frames: usize) -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            videos_per_class: 2,
            frames_per_video: frames,
            image_size: 32,
            domain: Domain::Target,
            seed: 11,
        }
    }

    #[test]
    fn minimum_length_clip() {
        let clip = generate_video(&spec(2), 1, 99).unwrap();
        assert_eq!(clip.len(), 2);
        assert_eq!(clip.frame_shape(), (32, 32, 3));
        clip.validate().unwrap();
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let a = generate_video(&spec(4), 3, 1234).unwrap();
        let b = generate_video(&spec(4), 3, 1234).unwrap();
        assert_eq!(a, b);
        let c = generate_video(&spec(4), 3, 1235).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn rejects_bad_class_and_spec() {
        assert!(generate_video(&spec(4), 4, 0).is_err());
        assert!(generate_video(&spec(1), 0, 0).is_err());
        let mut s = spec(4);
        s.image_size = 8;
        assert!(generate_video(&s, 0, 0).is_err());
    }

    #[test]
    fn distant_frames_differ_more_than_adjacent() {
        let s = SynthSpec {
            num_classes: 4,
            videos_per_class: 25,
            frames_per_video: 12,
            image_size: 32,
            domain: Domain::Source,
            seed: 5,
        };
        let clips = generate_corpus(&s).unwrap();
        assert_eq!(clips.len(), 100);
        let (mut near, mut far) = (0.0, 0.0);
        for c in &clips {
            near += mean_l1(&c.frames[0], &c.frames[1]);
            far += mean_l1(&c.frames[0], &c.frames[10]);
        }
        assert!(far > near, "far {far} near {near}");
        for c in &clips {
            assert!(mean_l1(&c.frames[0], &c.frames[1]) > 0.0);
        }
    }

    #[test]
    fn shape_families_are_distinct_masks() {
        let n = 48;
        let masks: Vec<Vec<bool>> = (0..NUM_SHAPE_FAMILIES)
            .map(|f| {
                (0..n * n)
                    .map(|k| {
                        let x = ((k % n) as f64 + 0.5) / n as f64 * 2.4 - 1.2;
                        let y = ((k / n) as f64 + 0.5) / n as f64 * 2.4 - 1.2;
                        shape_sdf(f, x, y) < 0.0
                    })
                    .collect()
            })
            .collect();
        for i in 0..masks.len() {
            assert!(masks[i].iter().any(|&b| b));
            for j in i + 1..masks.len() {
                let diff = masks[i].iter().zip(&masks[j]).filter(|(a, b)| a != b).count();
                assert!(diff > n * n / 50, "families {i} and {j} overlap too much");
            }
        }
    }
}
