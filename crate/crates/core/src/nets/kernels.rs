//! Inner products for the convolution layers.
//!
//! The shapes here are skinny (a handful of channels against thousands of
//! positions), where packing-based GEMM spends most of its time moving data.
//! Single precision gets hand-blocked AVX-512 kernels when the CPU has them;
//! everything else (including the f64 gradient checks) takes the portable
//! path.

use std::any::TypeId;

use crate::real::Real;

/// `out[a*k + b] += sum_j lhs[a*lhs_stride + j] * rhs[b*len + j]` for `a < m`,
/// `b < k`, `j < len`.
pub fn accumulate_outer<T: Real>(
    m: usize,
    k: usize,
    len: usize,
    lhs: &[T],
    lhs_stride: usize,
    rhs: &[T],
    out: &mut [T],
) {
    if m == 0 || k == 0 {
        return;
    }
    assert!(lhs.len() >= (m - 1) * lhs_stride + len, "lhs too short");
    assert!(rhs.len() >= k * len, "rhs too short");
    assert!(out.len() >= m * k, "out too short");
    #[cfg(target_arch = "x86_64")]
    if let Some((lhs, rhs, out)) = as_f32(lhs, rhs, out) {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected; extents asserted above.
            return unsafe { avx512::outer(m, k, len, lhs, lhs_stride, rhs, out) };
        }
    }
    for a in 0..m {
        let l = &lhs[a * lhs_stride..][..len];
        for b in 0..k {
            let r = &rhs[b * len..][..len];
            out[a * k + b] += dot(l, r);
        }
    }
}

/// `out[a*out_stride + j] += sum_r lhs[a*ls.0 + r*ls.1] * rhs[r*rhs_stride + j]`
/// for `a < m`, `r < depth`, `j < len`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_product<T: Real>(
    m: usize,
    depth: usize,
    len: usize,
    lhs: &[T],
    ls: (usize, usize),
    rhs: &[T],
    rhs_stride: usize,
    out: &mut [T],
    out_stride: usize,
) {
    if m == 0 || len == 0 || depth == 0 {
        return;
    }
    assert!(lhs.len() > (m - 1) * ls.0 + (depth - 1) * ls.1, "lhs too short");
    assert!(rhs.len() >= (depth - 1) * rhs_stride + len, "rhs too short");
    assert!(out.len() >= (m - 1) * out_stride + len, "out too short");
    #[cfg(target_arch = "x86_64")]
    if let Some((rhs, lhs, out)) = as_f32(rhs, lhs, out) {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected; extents asserted above.
            return unsafe { avx512::product(m, depth, len, lhs, ls, rhs, rhs_stride, out, out_stride) };
        }
    }
    for a in 0..m {
        let row = &mut out[a * out_stride..][..len];
        for r in 0..depth {
            let c = lhs[a * ls.0 + r * ls.1];
            for (o, &v) in row.iter_mut().zip(&rhs[r * rhs_stride..][..len]) {
                *o += c * v;
            }
        }
    }
}

/// Eight-way split accumulation so the sum vectorizes. Plain multiply-add
/// throughout: `mul_add` is a libm call on baseline x86-64.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for q in 0..8 {
            acc[q] += x[q] * y[q];
        }
    }
    let mut total = acc.iter().copied().sum::<T>();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        total += x * y;
    }
    total
}

/// Eight-way split sum.
pub fn lane_sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = a.chunks_exact(8);
    for x in &mut chunks {
        for q in 0..8 {
            acc[q] += x[q];
        }
    }
    acc.iter().copied().sum::<T>() + chunks.remainder().iter().copied().sum::<T>()
}

/// Eight-way split `sum (v - mean)^2`.
pub fn centered_square_sum<T: Real>(a: &[T], mean: T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = a.chunks_exact(8);
    for x in &mut chunks {
        for q in 0..8 {
            let d = x[q] - mean;
            acc[q] += d * d;
        }
    }
    let tail: T = chunks.remainder().iter().map(|&v| (v - mean) * (v - mean)).sum();
    acc.iter().copied().sum::<T>() + tail
}

/// Views the three slices as `f32` when `T` is `f32`.
#[allow(clippy::type_complexity)]
fn as_f32<'a, T: Real>(
    a: &'a [T],
    b: &'a [T],
    out: &'a mut [T],
) -> Option<(&'a [f32], &'a [f32], &'a mut [f32])> {
    if TypeId::of::<T>() != TypeId::of::<f32>() {
        return None;
    }
    // SAFETY: `T` is `f32`, so layouts and lengths are identical.
    unsafe {
        Some((
            std::slice::from_raw_parts(a.as_ptr().cast(), a.len()),
            std::slice::from_raw_parts(b.as_ptr().cast(), b.len()),
            std::slice::from_raw_parts_mut(out.as_mut_ptr().cast(), out.len()),
        ))
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    const LANES: usize = 16;

    /// 4x4 block of dot products, sixteen lanes at a time.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn outer(
        m: usize,
        k: usize,
        len: usize,
        lhs: &[f32],
        lhs_stride: usize,
        rhs: &[f32],
        out: &mut [f32],
    ) {
        const B: usize = 4;
        let full = len - len % LANES;
        let zeros = vec![0f32; len];
        for a0 in (0..m).step_by(B) {
            let lp: [*const f32; B] = std::array::from_fn(|i| {
                if a0 + i < m {
                    lhs[(a0 + i) * lhs_stride..].as_ptr()
                } else {
                    zeros.as_ptr()
                }
            });
            for b0 in (0..k).step_by(B) {
                let rp: [*const f32; B] = std::array::from_fn(|i| {
                    if b0 + i < k {
                        rhs[(b0 + i) * len..].as_ptr()
                    } else {
                        zeros.as_ptr()
                    }
                });
                let mut acc = [_mm512_setzero_ps(); B * B];
                let mut j = 0;
                while j < full {
                    let r: [__m512; B] = std::array::from_fn(|i| _mm512_loadu_ps(rp[i].add(j)));
                    for a in 0..B {
                        let l = _mm512_loadu_ps(lp[a].add(j));
                        for b in 0..B {
                            acc[a * B + b] = _mm512_fmadd_ps(l, r[b], acc[a * B + b]);
                        }
                    }
                    j += LANES;
                }
                for a in 0..B.min(m - a0) {
                    for b in 0..B.min(k - b0) {
                        let mut total = _mm512_reduce_add_ps(acc[a * B + b]);
                        for q in full..len {
                            total = (*lp[a].add(q)).mul_add(*rp[b].add(q), total);
                        }
                        out[(a0 + a) * k + b0 + b] += total;
                    }
                }
            }
        }
    }

    /// Eight output rows by 32 columns held in registers over the reduction.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn product(
        m: usize,
        depth: usize,
        len: usize,
        lhs: &[f32],
        ls: (usize, usize),
        rhs: &[f32],
        rhs_stride: usize,
        out: &mut [f32],
        out_stride: usize,
    ) {
        const BA: usize = 8;
        let blocks = m.div_ceil(BA);
        let mut packed = vec![[0f32; BA]; blocks * depth];
        for a in 0..m {
            for r in 0..depth {
                packed[(a / BA) * depth + r][a % BA] = lhs[a * ls.0 + r * ls.1];
            }
        }
        let w = 2 * LANES;
        let full = len - len % w;
        let rp = rhs.as_ptr();
        let op = out.as_mut_ptr();
        let mut j = 0;
        while j < full {
            for blk in 0..blocks {
                let coef = &packed[blk * depth..(blk + 1) * depth];
                let mut acc = [_mm512_setzero_ps(); 2 * BA];
                let mut row = rp.add(j);
                for c in coef {
                    let b0 = _mm512_loadu_ps(row);
                    let b1 = _mm512_loadu_ps(row.add(LANES));
                    for a in 0..BA {
                        let s = _mm512_set1_ps(c[a]);
                        acc[2 * a] = _mm512_fmadd_ps(s, b0, acc[2 * a]);
                        acc[2 * a + 1] = _mm512_fmadd_ps(s, b1, acc[2 * a + 1]);
                    }
                    row = row.wrapping_add(rhs_stride);
                }
                for a in 0..BA.min(m - blk * BA) {
                    let o = op.add((blk * BA + a) * out_stride + j);
                    _mm512_storeu_ps(o, _mm512_add_ps(_mm512_loadu_ps(o), acc[2 * a]));
                    let o = o.add(LANES);
                    _mm512_storeu_ps(o, _mm512_add_ps(_mm512_loadu_ps(o), acc[2 * a + 1]));
                }
            }
            j += w;
        }
        for a in 0..m {
            for jj in full..len {
                let mut total = 0f32;
                for r in 0..depth {
                    total = packed[(a / BA) * depth + r][a % BA].mul_add(rhs[r * rhs_stride + jj], total);
                }
                out[a * out_stride + jj] += total;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: u64) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u32 << 24) as f32) - 0.5
            })
            .collect()
    }

    fn widen(v: &[f32]) -> Vec<f64> {
        v.iter().map(|&x| x as f64).collect()
    }

    #[test]
    fn product_f32_matches_f64() {
        // Odd shapes exercise block padding and column tails.
        for (m, depth, len) in [(1, 1, 1), (3, 5, 31), (11, 27, 77), (43, 72, 230)] {
            let (rs, os) = (len + 3, len + 5);
            let lhs = pseudo(m * depth, 1);
            let rhs = pseudo(depth * rs, 2);
            let mut out = pseudo(m * os, 3);
            let mut expect = widen(&out);
            accumulate_product(m, depth, len, &lhs, (1, m), &rhs, rs, &mut out, os);
            accumulate_product(m, depth, len, &widen(&lhs), (1, m), &widen(&rhs), rs, &mut expect, os);
            for (a, b) in out.iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn outer_f32_matches_f64() {
        for (m, k, len) in [(1, 1, 1), (5, 7, 17), (43, 72, 300)] {
            let ls = len + 2;
            let lhs = pseudo(m * ls, 4);
            let rhs = pseudo(k * len, 5);
            let mut out = pseudo(m * k, 6);
            let mut expect = widen(&out);
            accumulate_outer(m, k, len, &lhs, ls, &rhs, &mut out);
            accumulate_outer(m, k, len, &widen(&lhs), ls, &widen(&rhs), &mut expect);
            for (a, b) in out.iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn split_sums_match_sequential() {
        let v: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        assert_eq!(lane_sum(&v), v.iter().sum::<f64>());
        assert_eq!(dot(&v, &v), v.iter().map(|x| x * x).sum::<f64>());
        let mean = lane_sum(&v) / 37.0;
        let direct: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
        assert!((centered_square_sum(&v, mean) - direct).abs() < 1e-9);
    }
}
