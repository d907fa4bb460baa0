//! Kernels for 3x3 same-padded convolution, per-instance normalization and
//! the pointwise activations, with their backward passes.
//!
//! Activations are laid out channel-major over a batch: `(C, B, H, W)`, so a
//! whole batch convolves with a single GEMM.

use super::kernels::{accumulate_outer, accumulate_product, centered_square_sum, dot, lane_sum};
use crate::real::Real;

pub const LEAK: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Activation tensor `(channels, batch, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Batch {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Elements between consecutive channel planes of one batch item.
    #[inline]
    pub fn channel_stride(&self) -> usize {
        self.batch * self.area()
    }

    /// Offset of item `b` inside channel 0.
    #[inline]
    pub fn item_offset(&self, b: usize) -> usize {
        b * self.area()
    }

    /// Copies item `b` into a contiguous `C x H x W` buffer.
    pub fn item(&self, b: usize) -> Vec<T> {
        let (a, cs) = (self.area(), self.channel_stride());
        let mut out = Vec::with_capacity(self.channels * a);
        for c in 0..self.channels {
            let start = c * cs + b * a;
            out.extend_from_slice(&self.data[start..start + a]);
        }
        out
    }

    /// Writes a contiguous `C x H x W` buffer into slot `b`.
    pub fn set_item(&mut self, b: usize, src: &[T]) {
        let (a, cs) = (self.area(), self.channel_stride());
        for c in 0..self.channels {
            let start = c * cs + b * a;
            self.data[start..start + a].copy_from_slice(&src[c * a..(c + 1) * a]);
        }
    }
}

/// Number of batch items convolved per GEMM call, sized so the column buffer
/// stays cache-resident.
const TILE_COLUMNS: usize = 4096;

fn tile_items(area: usize, batch: usize) -> usize {
    (TILE_COLUMNS / area.max(1)).clamp(1, batch.max(1))
}

/// `cols[(ci*9 + ky*3 + kx), (b, y, x)] = x[ci, b, y+ky-1, x+kx-1]` for the
/// items `items`, zero outside the image.
pub fn im2col_items<T: Real>(x: &Batch<T>, items: std::ops::Range<usize>, cols: &mut Vec<T>) {
    let (h, w, a) = (x.height, x.width, x.area());
    let cs = x.channel_stride();
    let n = items.len() * a;
    cols.clear();
    cols.resize(x.channels * 9 * n, T::zero());
    for ci in 0..x.channels {
        let src_c = &x.data[ci * cs + items.start * a..ci * cs + items.end * a];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                let dx = kx as isize - 1;
                let (x_lo, x_hi) = (usize::from(dx < 0), w - usize::from(dx > 0));
                if x_lo >= x_hi {
                    continue;
                }
                let s0 = (x_lo as isize + dx) as usize;
                for b in 0..items.len() {
                    for y in 0..h {
                        let ys = y as isize + ky as isize - 1;
                        if ys < 0 || ys >= h as isize {
                            continue;
                        }
                        let dst = &mut row[b * a + y * w..][..w];
                        let src = &src_c[b * a + ys as usize * w..][..w];
                        dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

/// Whole-batch column matrix.
pub fn im2col<T: Real>(x: &Batch<T>) -> Vec<T> {
    let mut cols = Vec::new();
    im2col_items(x, 0..x.batch, &mut cols);
    cols
}

/// Adjoint of [`im2col_items`]: scatters column gradients of `items` back onto
/// the input gradient `dx` (full-batch layout).
pub fn col2im_items<T: Real>(
    cols: &[T],
    shape: &Batch<T>,
    items: std::ops::Range<usize>,
    dx: &mut [T],
) {
    let (h, w, a) = (shape.height, shape.width, shape.area());
    let cs = shape.channel_stride();
    let n = items.len() * a;
    for ci in 0..shape.channels {
        let dst_c = &mut dx[ci * cs + items.start * a..ci * cs + items.end * a];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                let dxo = kx as isize - 1;
                let (x_lo, x_hi) = (usize::from(dxo < 0), w - usize::from(dxo > 0));
                if x_lo >= x_hi {
                    continue;
                }
                let s0 = (x_lo as isize + dxo) as usize;
                for b in 0..items.len() {
                    for y in 0..h {
                        let ys = y as isize + ky as isize - 1;
                        if ys < 0 || ys >= h as isize {
                            continue;
                        }
                        let src = &row[b * a + y * w..][..w];
                        let dst = &mut dst_c[b * a + ys as usize * w..][..w];
                        for (d, &g) in dst[s0..s0 + (x_hi - x_lo)].iter_mut().zip(&src[x_lo..x_hi]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

pub fn col2im<T: Real>(cols: &[T], shape: &Batch<T>, dx: &mut [T]) {
    col2im_items(cols, shape, 0..shape.batch, dx)
}

/// `y = W * im2col(x) + bias`.
pub fn conv_forward<T: Real>(x: &Batch<T>, weight: &[T], bias: &[T], cout: usize) -> Batch<T> {
    let k = x.channels * 9;
    let a = x.area();
    let n = x.batch * a;
    let mut y = Batch::zeros(cout, x.batch, x.height, x.width);
    for (co, row) in y.data.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    let step = tile_items(a, x.batch);
    let mut cols = Vec::new();
    for b0 in (0..x.batch).step_by(step) {
        let items = b0..(b0 + step).min(x.batch);
        let cols_n = items.len() * a;
        im2col_items(x, items.clone(), &mut cols);
        accumulate_product(cout, k, cols_n, weight, (k, 1), &cols, cols_n, &mut y.data[b0 * a..], n);
    }
    y
}

/// Accumulates weight/bias gradients (when `grad_w` is given) and returns the
/// input gradient when `want_input` is set.
pub fn conv_backward<T: Real>(
    x: &Batch<T>,
    weight: &[T],
    cout: usize,
    dy: &[T],
    grad_w: Option<(&mut [T], &mut [T])>,
    want_input: bool,
) -> Option<Vec<T>> {
    let k = x.channels * 9;
    let a = x.area();
    let n = x.batch * a;
    let mut grad_w = grad_w;
    if let Some((_, gb)) = grad_w.as_mut() {
        for (co, row) in dy.chunks(n).enumerate() {
            gb[co] += lane_sum(row);
        }
    }
    if grad_w.is_none() && !want_input {
        return None;
    }
    let mut dx = want_input.then(|| vec![T::zero(); x.data.len()]);
    let step = tile_items(a, x.batch);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for b0 in (0..x.batch).step_by(step) {
        let items = b0..(b0 + step).min(x.batch);
        let cols_n = items.len() * a;
        let dy_tile = &dy[b0 * a..];
        if let Some((gw, _)) = grad_w.as_mut() {
            im2col_items(x, items.clone(), &mut cols);
            accumulate_outer(cout, k, cols_n, dy_tile, n, &cols, gw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(k * cols_n, T::zero());
            accumulate_product(k, cout, cols_n, weight, (1, k), dy_tile, n, &mut dcols, cols_n);
            col2im_items(&dcols, x, items, dx);
        }
    }
    dx
}

/// Per-(channel, item) statistics gathered during a normalized forward pass.
#[derive(Clone, Debug)]
pub struct NormTrace<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalizes each `(c, b)` plane over its spatial positions, then applies
/// the per-channel affine map. Writes the result into `x`.
pub fn instance_norm_forward<T: Real>(x: &mut Batch<T>, gamma: &[T], beta: &[T]) -> NormTrace<T> {
    let a = x.area();
    let groups = x.channels * x.batch;
    let mut trace = NormTrace {
        xhat: vec![T::zero(); x.data.len()],
        inv_std: Vec::with_capacity(groups),
        mean: Vec::with_capacity(groups),
        var: Vec::with_capacity(groups),
    };
    let inv_a = T::one() / T::lit(a as f64);
    let eps = T::lit(NORM_EPS);
    for (g, seg) in x.data.chunks_mut(a).enumerate() {
        let c = g / x.batch;
        let mean = lane_sum(seg) * inv_a;
        let var = centered_square_sum(seg, mean) * inv_a;
        let inv_std = T::one() / (var + eps).sqrt();
        let xh = &mut trace.xhat[g * a..(g + 1) * a];
        for (v, h) in seg.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * inv_std;
            *v = gamma[c] * *h + beta[c];
        }
        trace.inv_std.push(inv_std);
        trace.mean.push(mean);
        trace.var.push(var);
    }
    trace
}

/// Normalization with fixed (running) statistics: purely pointwise.
pub fn fixed_norm_forward<T: Real>(
    x: &mut Batch<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) {
    let a = x.area();
    let eps = T::lit(NORM_EPS);
    for (g, seg) in x.data.chunks_mut(a).enumerate() {
        let c = g / x.batch;
        let scale = gamma[c] / (var[c] + eps).sqrt();
        let shift = beta[c] - mean[c] * scale;
        for v in seg {
            *v = *v * scale + shift;
        }
    }
}

/// Backward of [`instance_norm_forward`]; `dy` is replaced by `dx`.
pub fn instance_norm_backward<T: Real>(
    dy: &mut [T],
    trace: &NormTrace<T>,
    area: usize,
    batch: usize,
    gamma: &[T],
    grad_affine: Option<(&mut [T], &mut [T])>,
) {
    let inv_a = T::one() / T::lit(area as f64);
    let mut grad_affine = grad_affine;
    for (g, seg) in dy.chunks_mut(area).enumerate() {
        let c = g / batch;
        let xh = &trace.xhat[g * area..(g + 1) * area];
        let sum_d = lane_sum(seg);
        let sum_dx = dot(seg, xh);
        if let Some((gg, gb)) = grad_affine.as_mut() {
            gg[c] += sum_dx;
            gb[c] += sum_d;
        }
        let k = gamma[c] * trace.inv_std[g];
        let (m1, m2) = (sum_d * inv_a, sum_dx * inv_a);
        for (d, &h) in seg.iter_mut().zip(xh) {
            *d = k * (*d - m1 - h * m2);
        }
    }
}

#[inline]
pub fn leaky_relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::lit(LEAK)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Batch<f64>, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let (h, wd) = (x.height as isize, x.width as isize);
        let mut out = vec![0.0; cout * x.batch * x.area()];
        for co in 0..cout {
            for bi in 0..x.batch {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..x.channels {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (ys, xs) = (y + ky - 1, xx + kx - 1);
                                    if ys < 0 || xs < 0 || ys >= h || xs >= wd {
                                        continue;
                                    }
                                    let xv = x.data[((ci * x.batch + bi) * x.area())
                                        + (ys * wd + xs) as usize];
                                    acc += w[((co * x.channels + ci) * 9)
                                        + (ky * 3 + kx) as usize]
                                        * xv;
                                }
                            }
                        }
                        out[(co * x.batch + bi) * x.area() + (y * wd + xx) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (h, w) in [(1, 1), (1, 5), (4, 3), (6, 6)] {
            let mut x = Batch::<f64>::zeros(2, 3, h, w);
            x.data = pseudo(x.data.len(), 7);
            let wts = pseudo(3 * 2 * 9, 11);
            let bias = vec![0.1, -0.2, 0.3];
            let y = conv_forward(&x, &wts, &bias, 3);
            let expect = naive_conv(&x, &wts, &bias, 3);
            for (a, b) in y.data.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut x = Batch::<f64>::zeros(2, 2, 5, 4);
        x.data = pseudo(x.data.len(), 3);
        let cols = im2col(&x);
        let r = pseudo(cols.len(), 5);
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.data.len()];
        col2im(&r, &x, &mut back);
        let rhs: f64 = x.data.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut x = Batch::<f64>::zeros(2, 2, 3, 3);
        x.data = pseudo(x.data.len(), 9);
        instance_norm_forward(&mut x, &[1.0, 1.0], &[0.0, 0.0]);
        for seg in x.data.chunks(9) {
            let mean: f64 = seg.iter().sum::<f64>() / 9.0;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
