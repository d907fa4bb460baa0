//! Image ingestion, normalization and the multi-scale pyramid.
//!
//! Pixels live in `[-1, 1]` internally; the 8-bit mapping is `v / 127.5 - 1`.

mod planes;
mod resample;

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageReader};

pub use planes::{Image, Planes};
pub use resample::resize;

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Smallest admissible coarsest level: the 11x11 receptive field.
pub const RECEPTIVE_FIELD: usize = 11;

#[inline]
pub fn byte_to_unit(v: f32) -> f32 {
    v / 127.5 - 1.0
}

#[inline]
pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Loads `path`, center-crops to a square, converts to `channels` and
/// bicubic-resizes to `target x target`.
pub fn load_image(path: &Path, channels: usize, target: usize) -> Result<Image> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = ImageReader::open(path)
        .map_err(|e| ingest(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingest(e.to_string()))?
        .decode()
        .map_err(|e| ingest(e.to_string()))?;
    normalize(&decoded, channels, target)
}

/// Same as [`load_image`] for an in-memory encoded file.
pub fn decode_image(bytes: &[u8], channels: usize, target: usize) -> Result<Image> {
    let decoded = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::validation(e.to_string()))?
        .decode()
        .map_err(|e| Error::validation(e.to_string()))?;
    normalize(&decoded, channels, target)
}

/// Returns 3 when the file stores color, 1 for grayscale encodings.
pub fn probe_channels(path: &Path) -> Result<usize> {
    let decoded = ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(if decoded.color().has_color() { 3 } else { 1 })
}

fn normalize(decoded: &DynamicImage, channels: usize, target: usize) -> Result<Image> {
    if channels != 1 && channels != 3 {
        return Err(Error::validation(format!("unsupported channel count {channels}")));
    }
    if target == 0 {
        return Err(Error::validation("target resolution must be positive"));
    }
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation("zero-sized image"));
    }
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let color = decoded.color().has_color();
    // 8-bit sources go through bytes so byte values survive exactly.
    let eight_bit = decoded.color().bytes_per_pixel() == decoded.color().channel_count();
    let rgb = if eight_bit {
        let bytes = decoded.to_rgb8();
        image::ImageBuffer::from_fn(bytes.width(), bytes.height(), |x, y| {
            image::Rgb(bytes.get_pixel(x, y).0.map(|b| b as f32 / 255.0))
        })
    } else {
        decoded.to_rgb32f()
    };

    let mut square = Planes::zeros(channels, side, side);
    for y in 0..side {
        for x in 0..side {
            let p = rgb.get_pixel((x0 + x) as u32, (y0 + y) as u32).0;
            let px = if eight_bit {
                p.map(|v| (v * 255.0).round())
            } else {
                [p[0] * 255.0, p[1] * 255.0, p[2] * 255.0]
            };
            let idx = y * side + x;
            match (channels, color) {
                (1, true) => {
                    square.data[idx] = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                }
                (1, false) => square.data[idx] = px[0],
                _ => {
                    for (c, v) in px.iter().enumerate() {
                        square.data[c * side * side + idx] = *v;
                    }
                }
            }
        }
    }
    let mut resized = resize(&square, target, target);
    for v in &mut resized.data {
        *v = byte_to_unit(v.clamp(0.0, 255.0));
    }
    Image::new(resized)
}

/// Writes an 8-bit PNG (grayscale or RGB).
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let a = img.area();
    let dynimg = if img.channels == 1 {
        let buf: Vec<u8> = img.data.iter().map(|&v| unit_to_byte(v)).collect();
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, buf).expect("buffer size"))
    } else {
        let mut buf = Vec::with_capacity(a * 3);
        for p in 0..a {
            for c in 0..3 {
                buf.push(unit_to_byte(img.data[c * a + p]));
            }
        }
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, buf).expect("buffer size"))
    };
    dynimg.save(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Per-channel 256-bin histogram equalization on the 8-bit grid.
///
/// Constant channels come back untouched.
pub fn equalize_histogram(img: &Image) -> Image {
    let mut out = img.as_planes().clone();
    for c in 0..out.channels {
        let plane = out.plane_mut(c);
        let quantized: Vec<u8> = plane.iter().map(|&v| unit_to_byte(v)).collect();
        let mut hist = [0usize; 256];
        for &q in &quantized {
            hist[q as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut running = 0;
        for (bin, count) in hist.iter().enumerate() {
            running += count;
            cdf[bin] = running;
        }
        let total = quantized.len();
        let cdf_min = hist.iter().copied().find(|&n| n > 0).unwrap_or(0);
        if total == cdf_min {
            continue;
        }
        let denom = (total - cdf_min) as f64;
        let lut: Vec<f32> = (0..256)
            .map(|v| {
                let mapped = ((cdf[v].saturating_sub(cdf_min)) as f64 / denom * 255.0).round();
                byte_to_unit(mapped as f32)
            })
            .collect();
        for (dst, q) in plane.iter_mut().zip(quantized) {
            *dst = lut[q as usize];
        }
    }
    Image::new(out).expect("equalization stays in range")
}

/// Bicubic upsampling to `height x width`, clamped to `[-1, 1]`.
pub fn upsample(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height < img.height || width < img.width {
        return Err(Error::validation(format!(
            "upsample target {height}x{width} smaller than source {}x{}",
            img.height, img.width
        )));
    }
    Image::new(upsample_planes(img, height, width))
}

/// Unchecked variant used on generator outputs, which may leave `[-1, 1]`.
pub fn upsample_planes(src: &Planes, height: usize, width: usize) -> Planes {
    resize(src, height, width).clamp_unit()
}

#[inline]
fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Level sizes, coarsest first, for a finest side of `finest`.
pub fn pyramid_sizes(finest: usize, r: f64, min_size: usize) -> Result<Vec<usize>> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("scale factor r={r} must lie in (0, 1)")));
    }
    if min_size < RECEPTIVE_FIELD {
        return Err(Error::Config(format!(
            "min_size {min_size} is below the {RECEPTIVE_FIELD}px receptive field"
        )));
    }
    if min_size > finest {
        return Err(Error::Config(format!(
            "min_size {min_size} exceeds the finest resolution {finest}"
        )));
    }
    let mut n = 0;
    while round_half_up(finest as f64 * r.powi(n as i32 + 1)) >= min_size {
        n += 1;
    }
    let sizes: Vec<usize> = (0..=n)
        .map(|level| round_half_up(finest as f64 * r.powi((n - level) as i32)))
        .collect();
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "r={r} is too close to 1 for a {finest}px image: adjacent scales round to the same size"
        )));
    }
    Ok(sizes)
}

/// Images of one input at every scale, coarsest (`levels[0]`) to finest.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Image>,
    pub r: f64,
}

impl Pyramid {
    /// Index of the finest level.
    pub fn finest_index(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn finest(&self) -> &Image {
        self.levels.last().expect("pyramid has at least one level")
    }

    /// Square level sides, coarsest first.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.height, l.width)).collect()
    }

    /// Resamples `img` to exactly the given level shapes.
    pub fn with_sizes(img: &Image, r: f64, sizes: &[(usize, usize)]) -> Result<Pyramid> {
        if sizes.is_empty() {
            return Err(Error::validation("pyramid needs at least one level"));
        }
        let levels = sizes
            .iter()
            .map(|&(h, w)| Image::new(resize(img, h, w).clamp_unit()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pyramid { levels, r })
    }
}

pub fn build_pyramid(img: &Image, r: f64, min_size: usize) -> Result<Pyramid> {
    let finest = img.height.min(img.width);
    let sides = pyramid_sizes(finest, r, min_size)?;
    let top = sides.len() - 1;
    let sizes: Vec<(usize, usize)> = (0..=top)
        .map(|n| {
            let f = r.powi((top - n) as i32);
            if n == top {
                (img.height, img.width)
            } else {
                (
                    round_half_up(img.height as f64 * f),
                    round_half_up(img.width as f64 * f),
                )
            }
        })
        .collect();
    Pyramid::with_sizes(img, r, &sizes)
}
