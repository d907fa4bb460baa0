//! The fixed transformation group: flips, 15% reflective translations,
//! quarter-turn rotations and RGB-to-gray, in a canonical enumeration.
//!
//! Spatial components compose as `flip . tx . ty . rot` (rotation acts
//! first). Each transform is a pure index remapping, optionally followed by a
//! luma mix, so its derivative with respect to the pixels is a fixed sparse
//! matrix; [`TransformPlan`] exposes both directions.

use crate::error::{Error, Result};
use crate::imgpipe::{Planes, LUMA};
use crate::real::Real;

/// Fraction of the image side covered by one translation step.
pub const SHIFT_RATIO: f64 = 0.15;

/// Number of transforms in color mode.
pub const COLOR_COUNT: usize = 54;
/// Number of transforms for grayscale data (no RGB-to-gray members).
pub const GRAY_COUNT: usize = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TransformDescriptor {
    /// 1-based position in the canonical enumeration.
    pub index: usize,
    pub flip: bool,
    /// +1 shifts content left, -1 right.
    pub tx: i8,
    /// +1 shifts content up, -1 down.
    pub ty: i8,
    /// Counter-clockwise quarter turns in degrees: 0, 90, 180 or 270.
    pub rot: u16,
    pub gray: bool,
}

impl TransformDescriptor {
    pub const IDENTITY: TransformDescriptor = TransformDescriptor {
        index: 1,
        flip: false,
        tx: 0,
        ty: 0,
        rot: 0,
        gray: false,
    };

    pub fn is_translation_free(&self) -> bool {
        self.tx == 0 && self.ty == 0
    }
}

const ROTATIONS: [u16; 4] = [0, 90, 180, 270];

/// Enumerates the transform set: 54 members in color mode, the first 42
/// otherwise.
pub fn enumerate_transforms(color_mode: bool) -> Vec<TransformDescriptor> {
    let mut out = Vec::with_capacity(COLOR_COUNT);
    let mut push = |flip: bool, tx: i8, ty: i8, rot: u16, gray: bool| {
        out.push(TransformDescriptor {
            index: out.len() + 1,
            flip,
            tx,
            ty,
            rot,
            gray,
        })
    };
    for flip in [false, true] {
        for tx in [0, 1] {
            for ty in [0, 1] {
                for rot in ROTATIONS {
                    push(flip, tx, ty, rot, false);
                }
            }
        }
    }
    for flip in [false, true] {
        for tx in [-1, 1, 0] {
            push(flip, tx, -1, 0, false);
        }
    }
    for flip in [false, true] {
        for ty in [0, 1] {
            push(flip, -1, ty, 0, false);
        }
    }
    if color_mode {
        for flip in [false, true] {
            for rot in ROTATIONS {
                push(flip, 0, 0, rot, true);
            }
        }
        for tx in [-1, 1] {
            push(false, tx, 0, 0, true);
        }
        for ty in [-1, 1] {
            push(false, 0, ty, 0, true);
        }
    }
    out
}

/// Pixel shift for one translation step along a side of `len` pixels.
pub fn shift_pixels(len: usize) -> isize {
    (SHIFT_RATIO * len as f64).round() as isize
}

/// Reflection about the border pixels without repeating them
/// (`-1 -> 1`, `len -> len - 2`).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Source coordinate of a quarter-turn rotation (`out(y, x) = in(src)`).
fn rotate_source(rot: u16, y: usize, x: usize, side: usize) -> (usize, usize) {
    match rot {
        90 => (x, side - 1 - y),
        180 => (side - 1 - y, side - 1 - x),
        270 => (side - 1 - x, y),
        _ => (y, x),
    }
}

/// Precomputed gather table for one transform at one spatial size.
#[derive(Clone, Debug)]
pub struct TransformPlan {
    pub descriptor: TransformDescriptor,
    pub height: usize,
    pub width: usize,
    /// For every output position, the input position it copies.
    source: Vec<u32>,
}

impl TransformPlan {
    pub fn new(t: TransformDescriptor, height: usize, width: usize) -> Result<Self> {
        if (t.rot == 90 || t.rot == 270) && height != width {
            return Err(Error::validation(format!(
                "quarter-turn rotation needs a square input, got {height}x{width}"
            )));
        }
        let sx = shift_pixels(width) * t.tx as isize;
        let sy = shift_pixels(height) * t.ty as isize;
        let mut source = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                // peel components from the outermost (flip) inwards
                let x1 = if t.flip { width - 1 - x } else { x };
                let x2 = reflect(x1 as isize + sx, width);
                let y2 = reflect(y as isize + sy, height);
                let (ys, xs) = rotate_source(t.rot, y2, x2, width);
                source.push((ys * width + xs) as u32);
            }
        }
        Ok(TransformPlan {
            descriptor: t,
            height,
            width,
            source,
        })
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if self.descriptor.gray && channels != 3 {
            return Err(Error::validation(format!(
                "gray transform T{} needs a 3-channel input, got {channels}",
                self.descriptor.index
            )));
        }
        Ok(())
    }

    /// Writes the transformed `src` (channel-major, `channels` planes of this
    /// plan's size) into `dst`, whose planes are `dst_stride` elements apart.
    pub fn forward_into<T: Real>(
        &self,
        src: &[T],
        channels: usize,
        dst: &mut [T],
        dst_stride: usize,
    ) -> Result<()> {
        self.check_channels(channels)?;
        let area = self.height * self.width;
        if self.descriptor.gray {
            let w = LUMA.map(|v| T::lit(v as f64));
            for (p, &s) in self.source.iter().enumerate() {
                let s = s as usize;
                let luma = w[0] * src[s] + w[1] * src[area + s] + w[2] * src[2 * area + s];
                for c in 0..3 {
                    dst[c * dst_stride + p] = luma;
                }
            }
        } else {
            for c in 0..channels {
                let plane = &src[c * area..(c + 1) * area];
                let out = &mut dst[c * dst_stride..c * dst_stride + area];
                for (o, &s) in out.iter_mut().zip(&self.source) {
                    *o = plane[s as usize];
                }
            }
        }
        Ok(())
    }

    /// Accumulates the vector-Jacobian product: `grad_src += J^T grad_dst`.
    pub fn backward_into<T: Real>(
        &self,
        grad_dst: &[T],
        dst_stride: usize,
        channels: usize,
        grad_src: &mut [T],
    ) -> Result<()> {
        self.check_channels(channels)?;
        let area = self.height * self.width;
        if self.descriptor.gray {
            let w = LUMA.map(|v| T::lit(v as f64));
            for (p, &s) in self.source.iter().enumerate() {
                let s = s as usize;
                let g = grad_dst[p] + grad_dst[dst_stride + p] + grad_dst[2 * dst_stride + p];
                for c in 0..3 {
                    grad_src[c * area + s] += w[c] * g;
                }
            }
        } else {
            for c in 0..channels {
                let g = &grad_dst[c * dst_stride..c * dst_stride + area];
                let dst = &mut grad_src[c * area..(c + 1) * area];
                for (&gv, &s) in g.iter().zip(&self.source) {
                    dst[s as usize] += gv;
                }
            }
        }
        Ok(())
    }
}

/// Applies `t` to an image-shaped array, preserving its dimensions.
pub fn apply_transform(img: &Planes, t: &TransformDescriptor) -> Result<Planes> {
    let plan = TransformPlan::new(*t, img.height, img.width)?;
    let mut out = Planes::zeros(img.channels, img.height, img.width);
    plan.forward_into(&img.data, img.channels, &mut out.data, img.area())?;
    Ok(out)
}

fn rotate_map(m: &[f64], side: usize, rot: u16) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (ys, xs) = rotate_source(rot, y, x, side);
            out[y * side + x] = m[ys * side + xs];
        }
    }
    out
}

/// Maps a response map computed on `T(x)` back onto the coordinates of `x`.
///
/// Undoes flip, then the translations (cells uncovered by the shift become
/// 0), then the rotation. The gray component has no spatial action.
pub fn invert_response_map(
    map: &[f64],
    height: usize,
    width: usize,
    t: &TransformDescriptor,
) -> Result<Vec<f64>> {
    if map.len() != height * width {
        return Err(Error::validation("response map size does not match its shape"));
    }
    if (t.rot == 90 || t.rot == 270) && height != width {
        return Err(Error::validation("quarter-turn inversion needs a square map"));
    }
    let mut cur = map.to_vec();
    if t.flip {
        for row in cur.chunks_mut(width) {
            row.reverse();
        }
    }
    let sx = shift_pixels(width) * t.tx as isize;
    let sy = shift_pixels(height) * t.ty as isize;
    if sx != 0 || sy != 0 {
        let mut shifted = vec![0.0; height * width];
        for y in 0..height as isize {
            for x in 0..width as isize {
                let (ys, xs) = (y - sy, x - sx);
                if (0..height as isize).contains(&ys) && (0..width as isize).contains(&xs) {
                    shifted[(y * width as isize + x) as usize] =
                        cur[(ys * width as isize + xs) as usize];
                }
            }
        }
        cur = shifted;
    }
    if t.rot != 0 {
        cur = rotate_map(&cur, width, (360 - t.rot) % 360);
    }
    Ok(cur)
}
