//! Scalar abstraction and small dense kernels shared by the model and the loss.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView1, ArrayViewMut1, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type the model is generic over. Training runs in
/// `f32`; gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `exp` for the hot loops (softmax, GELU). Exact for `f64`.
    fn fast_exp(self) -> Self;
}

impl Real for f32 {
    /// Range reduction to `r in [-ln2/2, ln2/2]`, degree-6 polynomial, then
    /// scaling by `2^n` through the exponent bits. Max relative error ~2 ulp.
    #[inline]
    fn fast_exp(self) -> f32 {
        const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
        let x = self.clamp(-87.0, 88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let p = (((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
            + 1.666_666_5e-1)
            * r
            + 5.000_000_1e-1)
            * r
            * r
            + r
            + 1.0;
        p * f32::from_bits(((n as i32 + 127) as u32) << 23)
    }
}

impl Real for f64 {
    #[inline]
    fn fast_exp(self) -> f64 {
        self.exp()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn tanh_via_exp<T: Real>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).fast_exp() + T::one())
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + tanh_via_exp(u))
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = tanh_via_exp(u);
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

pub fn softmax_inplace<T: Real>(mut row: ArrayViewMut1<T>) {
    match row.as_slice_mut() {
        Some(s) => softmax_slice(s),
        None => {
            let mut buf = row.to_vec();
            softmax_slice(&mut buf);
            row.iter_mut().zip(buf).for_each(|(d, v)| *d = v);
        }
    }
}

fn softmax_slice<T: Real>(s: &mut [T]) {
    let max = s.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    for v in s.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let sum: T = s.iter().copied().sum();
    let inv = T::one() / sum;
    for v in s.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for row in m.rows_mut() {
        softmax_inplace(row);
    }
}

/// `log(sum(exp(x)))` computed with the max-shift.
pub fn logsumexp<T: Real>(x: ArrayView1<T>) -> T {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    let s: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Weights of a 1-D linear interpolation from `src` samples to `dst` samples
/// with half-pixel centres (the `align_corners = false` convention).
/// Returns, for each destination index, `(i0, i1, w1)` with weight `1 - w1` on `i0`.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Dense `[dst*dst, src*src]` matrix resampling a square grid bilinearly.
pub fn bilinear_matrix<T: Real>(src: usize, dst: usize) -> Array2<T> {
    let taps = linear_taps(src, dst);
    let mut m = Array2::<T>::zeros((dst * dst, src * src));
    for (yi, &(y0, y1, wy)) in taps.iter().enumerate() {
        for (xi, &(x0, x1, wx)) in taps.iter().enumerate() {
            let row = yi * dst + xi;
            for (sy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                for (sx, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                    m[[row, sy * src + sx]] += T::lit(fy * fx);
                }
            }
        }
    }
    m
}
