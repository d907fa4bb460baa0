//! Separable bicubic resampling (Keys kernel, a = -0.5).
//!
//! Downscaling widens the kernel by the scale ratio so the filter also acts
//! as an anti-aliasing low-pass. Taps falling outside the source are dropped
//! and the remaining weights renormalized.

use super::planes::Planes;

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

struct Taps {
    start: usize,
    weights: Vec<f64>,
}

fn taps(src: usize, dst: usize) -> Vec<Taps> {
    let ratio = src as f64 / dst as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as isize).min(src as isize) as usize;
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| cubic((j as f64 + 0.5 - center) / stretch))
                .collect();
            let total: f64 = weights.iter().sum();
            if total.abs() > 1e-12 {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            Taps { start: lo, weights }
        })
        .collect()
}

/// Weighted sum anchored on the first tap so constant inputs reproduce the
/// constant exactly regardless of rounding in the normalized weights.
#[inline]
fn apply(taps: &Taps, sample: impl Fn(usize) -> f32) -> f32 {
    let anchor = sample(taps.start) as f64;
    let mut acc = 0.0f64;
    for (j, w) in taps.weights.iter().enumerate() {
        acc += w * (sample(taps.start + j) as f64 - anchor);
    }
    (anchor + acc) as f32
}

/// Resizes every channel to `height x width`. No clamping.
pub fn resize(src: &Planes, height: usize, width: usize) -> Planes {
    if src.height == height && src.width == width {
        return src.clone();
    }
    let xt = taps(src.width, width);
    let yt = taps(src.height, height);
    let mut out = Planes::zeros(src.channels, height, width);
    let mut rows = vec![0f32; src.height * width];
    for c in 0..src.channels {
        let plane = src.plane(c);
        for y in 0..src.height {
            let row = &plane[y * src.width..(y + 1) * src.width];
            for (x, t) in xt.iter().enumerate() {
                rows[y * width + x] = apply(t, |j| row[j]);
            }
        }
        let dst = out.plane_mut(c);
        for (y, t) in yt.iter().enumerate() {
            for x in 0..width {
                dst[y * width + x] = apply(t, |j| rows[j * width + x]);
            }
        }
    }
    out
}
