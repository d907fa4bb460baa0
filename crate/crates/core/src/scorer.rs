//! Anomaly and defect scores from per-patch transformation votes, plus the
//! defect-localization map.
//!
//! Higher scores mean "more normal" throughout.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgpipe::{Image, Planes, Pyramid};
use crate::nets::{batch_of, Batch, NormMode};
use crate::trainer::{ModelStack, VoteRule};
use crate::transforms::{invert_response_map, TransformDescriptor, TransformPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreOptions {
    /// Average votes per scale instead of summing raw patch counts.
    pub per_scale_mean: bool,
    pub norm: NormMode,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            per_scale_mean: false,
            norm: NormMode::Instance,
        }
    }
}

/// Correct-class probabilities of one scale: one `height x width` map per
/// scored transformation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVotes {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchVotes {
    pub scales: Vec<ScaleVotes>,
}

/// Real-valued map with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Default patch fraction for the defect score.
pub fn default_fraction(k: usize) -> f64 {
    if k <= 1 {
        0.05
    } else {
        0.10
    }
}

/// Softmax over `logits[lo..]`, returning the probability of `class`.
fn class_probability(logits: &[f64], lo: usize, class: usize) -> f64 {
    let live = &logits[lo..];
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = live.iter().map(|&z| (z - max).exp()).sum();
    (logits[class] - max).exp() / denom
}

fn pyramid_for(stack: &ModelStack, img: &Image) -> Result<Pyramid> {
    let meta = &stack.meta;
    let (h, w) = meta.size(meta.finest_index());
    if img.channels != meta.channels || img.height != h || img.width != w {
        return Err(Error::validation(format!(
            "image is {}x{}x{}, stack expects {}x{}x{}",
            img.channels, img.height, img.width, meta.channels, h, w
        )));
    }
    let sizes: Vec<(usize, usize)> = meta.sizes.iter().map(|s| (s[0], s[1])).collect();
    Pyramid::with_sizes(img, meta.r, &sizes)
}

/// Votes of every scale's discriminator on every scored transformation of
/// the (preprocessed, finest-resolution) image.
pub fn patch_votes(stack: &ModelStack, img: &Image, opts: &ScoreOptions) -> Result<PatchVotes> {
    stack.require_trained()?;
    let pyramid = pyramid_for(stack, img)?;
    let meta = &stack.meta;
    let transforms = meta.score_transforms();
    let lo = usize::from(meta.vote_rule() == VoteRule::DropFake);
    let chunk = meta.config.transform_chunk.max(1);
    let scales = pyramid
        .levels
        .iter()
        .zip(&stack.scales)
        .map(|(level, model)| {
            let (h, w) = (level.height, level.width);
            let a = h * w;
            let src: Batch<f32> = batch_of(&[level.as_planes()])?;
            let mut maps = Vec::with_capacity(transforms.len());
            for (c0, group) in transforms.chunks(chunk).enumerate() {
                let mut x = Batch::zeros(level.channels, group.len(), h, w);
                for (b, t) in group.iter().enumerate() {
                    TransformPlan::new(*t, h, w)?.forward_into(
                        &src.data,
                        level.channels,
                        &mut x.data[b * a..],
                        group.len() * a,
                    )?;
                }
                let out = model.discriminator.forward(&x, opts.norm)?;
                let classes = out.channels;
                let stride = group.len() * a;
                for b in 0..group.len() {
                    let class = meta.real_class(c0 * chunk + b);
                    let mut logits = vec![0.0; classes];
                    let map = (0..a)
                        .map(|p| {
                            for (c, z) in logits.iter_mut().enumerate() {
                                *z = out.data[c * stride + b * a + p] as f64;
                            }
                            class_probability(&logits, lo, class)
                        })
                        .collect();
                    maps.push(map);
                }
            }
            Ok(ScaleVotes {
                height: h,
                width: w,
                maps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchVotes { scales })
}

fn sum_votes(votes: &PatchVotes, per_scale_mean: bool, select: impl Fn(&[f64]) -> f64) -> f64 {
    votes
        .scales
        .iter()
        .map(|s| {
            let total: f64 = s.maps.iter().map(|m| select(m)).sum();
            if per_scale_mean {
                total / (s.height * s.width) as f64
            } else {
                total
            }
        })
        .sum()
}

/// Sum of all votes over scales, transformations and patches.
pub fn score_votes(votes: &PatchVotes, per_scale_mean: bool) -> f64 {
    sum_votes(votes, per_scale_mean, |m| m.iter().sum())
}

pub fn anomaly_score(stack: &ModelStack, img: &Image, opts: &ScoreOptions) -> Result<f64> {
    Ok(score_votes(&patch_votes(stack, img, opts)?, opts.per_scale_mean))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("fraction {fraction} outside (0, 1]")))
    }
}

/// Mask of the `ceil(fraction * len)` lowest entries, ties to the lowest
/// index.
pub fn lowest_mask(map: &[f64], fraction: f64) -> Vec<bool> {
    // The small slack keeps products like 0.1 * 40 from rounding up a whole patch.
    let count = ((fraction * map.len() as f64 - 1e-9).ceil() as usize).clamp(1, map.len().max(1));
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[a].total_cmp(&map[b]).then(a.cmp(&b)));
    let mut mask = vec![false; map.len()];
    for &p in order.iter().take(count) {
        mask[p] = true;
    }
    mask
}

/// Defect score from precomputed votes. Selected votes are summed in index
/// order so `fraction = 1` reproduces [`score_votes`] exactly.
pub fn defect_votes(votes: &PatchVotes, fraction: f64, per_scale_mean: bool) -> Result<f64> {
    check_fraction(fraction)?;
    Ok(sum_votes(votes, per_scale_mean, |m| {
        let mask = lowest_mask(m, fraction);
        m.iter().zip(&mask).filter(|(_, &s)| s).map(|(v, _)| v).sum()
    }))
}

pub fn defect_score(stack: &ModelStack, img: &Image, fraction: f64, opts: &ScoreOptions) -> Result<f64> {
    check_fraction(fraction)?;
    defect_votes(&patch_votes(stack, img, opts)?, fraction, opts.per_scale_mean)
}

/// Selected votes of one scale mapped back to image coordinates and summed
/// over transformations.
pub fn selection_map(votes: &ScaleVotes, transforms: &[TransformDescriptor], fraction: f64) -> Result<Heatmap> {
    check_fraction(fraction)?;
    if transforms.len() != votes.maps.len() {
        return Err(Error::validation("one transformation per vote map"));
    }
    let (h, w) = (votes.height, votes.width);
    let mut values = vec![0.0; h * w];
    for (map, t) in votes.maps.iter().zip(transforms) {
        let mask = lowest_mask(map, fraction);
        let kept: Vec<f64> = map.iter().zip(&mask).map(|(&v, &s)| if s { v } else { 0.0 }).collect();
        for (acc, v) in values.iter_mut().zip(invert_response_map(&kept, h, w, t)?) {
            *acc += v;
        }
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values,
    })
}

/// Localization map at the finest scale.
pub fn defect_map(stack: &ModelStack, img: &Image, fraction: f64, opts: &ScoreOptions) -> Result<Heatmap> {
    check_fraction(fraction)?;
    let votes = patch_votes(stack, img, opts)?;
    let finest = votes.scales.last().expect("stack has scales");
    selection_map(finest, &stack.meta.score_transforms(), fraction)
}

/// Negative mean MSE to the training images (higher = more normal).
pub fn mse_baseline_score(train: &[Image], img: &Image) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::validation("no training images"));
    }
    let mut total = 0.0;
    for t in train {
        let a: &Planes = t;
        total += a.mse(img)?;
    }
    Ok(-total / train.len() as f64)
}

/// Min-max normalized 8-bit grayscale PNG; a constant map renders black.
pub fn save_map_png(map: &Heatmap, path: &Path) -> Result<()> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = map
        .values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let buf = image::GrayImage::from_raw(map.width as u32, map.height as u32, pixels)
        .ok_or_else(|| Error::validation("map buffer does not match its shape"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

const MAP_MAGIC: &[u8; 4] = b"HTDG";
const MAP_VERSION: u32 = 1;

/// Raw map: 16-byte header (magic, version, height, width as u32 LE) then
/// float32 LE values.
pub fn encode_raw_map(map: &Heatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values.len());
    out.extend_from_slice(MAP_MAGIC);
    for v in [MAP_VERSION, map.height as u32, map.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw_map(bytes: &[u8]) -> Result<Heatmap> {
    let bad = |reason: &str| Error::format("raw map", reason);
    if bytes.len() < 16 {
        return Err(bad("shorter than its header"));
    }
    if &bytes[..4] != MAP_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != MAP_VERSION {
        return Err(bad("unsupported version"));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    match h.checked_mul(w).and_then(|n| n.checked_mul(4)) {
        Some(n) if n == body.len() => {}
        _ => return Err(bad("payload length does not match the header shape")),
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Heatmap {
        height: h,
        width: w,
        values,
    })
}

pub fn write_raw_map(map: &Heatmap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_raw_map(map))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(maps: Vec<Vec<f64>>, h: usize, w: usize) -> PatchVotes {
        PatchVotes {
            scales: vec![ScaleVotes {
                height: h,
                width: w,
                maps,
            }],
        }
    }

    #[test]
    fn lowest_quarter_of_four_is_the_minimum() {
        let v = votes(vec![vec![0.1, 0.9, 0.9, 0.9]], 2, 2);
        assert_eq!(defect_votes(&v, 0.25, false).unwrap(), 0.1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(lowest_mask(&[0.5, 0.2, 0.2, 0.2], 0.5), vec![false, true, true, false]);
    }

    #[test]
    fn selection_count_is_a_ceiling() {
        let m = vec![0.5; 40];
        assert_eq!(lowest_mask(&m, 0.1).iter().filter(|&&s| s).count(), 4);
        assert_eq!(lowest_mask(&m, 0.11).iter().filter(|&&s| s).count(), 5);
        assert_eq!(lowest_mask(&m, 0.001).iter().filter(|&&s| s).count(), 1);
    }

    #[test]
    fn fraction_out_of_range_is_rejected() {
        let v = votes(vec![vec![0.5]], 1, 1);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(defect_votes(&v, f, false).is_err());
        }
    }

    #[test]
    fn per_scale_mean_divides_by_area() {
        let v = votes(vec![vec![0.5; 4], vec![0.25; 4]], 2, 2);
        assert_eq!(score_votes(&v, false), 3.0);
        assert_eq!(score_votes(&v, true), 0.75);
    }

    #[test]
    fn quarter_turn_map_is_rotated_back() {
        let t = TransformDescriptor {
            rot: 90,
            ..TransformDescriptor::IDENTITY
        };
        let map: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let s = ScaleVotes {
            height: 3,
            width: 3,
            maps: vec![map.clone()],
        };
        let out = selection_map(&s, &[t], 1.0).unwrap();
        // A further 270 degree counter-clockwise turn: out(y, x) = map(2 - x, y).
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.values[y * 3 + x], map[(2 - x) * 3 + y]);
            }
        }
    }

    #[test]
    fn identity_full_fraction_map_sums_votes() {
        let s = ScaleVotes {
            height: 1,
            width: 3,
            maps: vec![vec![0.1, 0.2, 0.3], vec![0.3, 0.2, 0.1]],
        };
        let ids = [TransformDescriptor::IDENTITY; 2];
        let out = selection_map(&s, &ids, 1.0).unwrap();
        assert_eq!(out.values, vec![0.1 + 0.3, 0.2 + 0.2, 0.3 + 0.1]);
    }

    #[test]
    fn mse_baseline_examples() {
        let a = Image::new(Planes::filled(1, 2, 2, 0.3)).unwrap();
        let b = Image::new(Planes::filled(1, 2, 2, 0.5)).unwrap();
        assert_eq!(mse_baseline_score(std::slice::from_ref(&a), &a).unwrap(), 0.0);
        assert!((mse_baseline_score(std::slice::from_ref(&a), &b).unwrap() + 0.04).abs() < 1e-7);
        let two = mse_baseline_score(&[a.clone(), b.clone()], &b).unwrap();
        assert!((two + 0.02).abs() < 1e-7);
        assert!(mse_baseline_score(&[], &a).is_err());
    }

    #[test]
    fn raw_map_round_trips() {
        let m = Heatmap {
            height: 2,
            width: 3,
            values: vec![0.0, 1.5, -2.0, 3.25, 4.0, 0.125],
        };
        let bytes = encode_raw_map(&m);
        assert_eq!(&bytes[..4], b"HTDG");
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_raw_map(&bytes).unwrap(), m);
        assert!(decode_raw_map(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_raw_map(&bytes[..10]).is_err());
    }
}
