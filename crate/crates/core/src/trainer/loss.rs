//! Cross-entropy over per-patch discriminator logits and the reconstruction
//! error.
//!
//! Each (transformation, real/fake) term is the mean of its per-patch
//! cross-entropies; terms are summed over transformations.

use crate::error::{Error, Result};
use crate::imgpipe::Planes;
use crate::nets::{Batch, ResponseMap};
use crate::real::Real;

/// Sum over batch items of the patch-mean cross-entropy of item `b` against
/// class `targets[b]`. Returns the loss and, if requested, its gradient with
/// respect to the logits (same layout as `logits`).
pub fn patch_cross_entropy<T: Real>(
    logits: &Batch<T>,
    targets: &[usize],
    want_grad: bool,
) -> (f64, Option<Vec<T>>) {
    assert_eq!(targets.len(), logits.batch, "one target per batch item");
    let a = logits.area();
    let cs = logits.channel_stride();
    let classes = logits.channels;
    let mut grad = want_grad.then(|| vec![T::zero(); logits.data.len()]);
    let inv_a = T::lit(1.0 / a as f64);
    let mut total = 0.0f64;
    let mut max = vec![T::zero(); a];
    let mut z = vec![T::zero(); a];
    // Channel-outer sweeps keep the inner loops contiguous.
    for (b, &target) in targets.iter().enumerate() {
        let row = |c: usize| &logits.data[c * cs + b * a..c * cs + b * a + a];
        max.copy_from_slice(row(0));
        for c in 1..classes {
            for (m, &v) in max.iter_mut().zip(row(c)) {
                *m = if v > *m { v } else { *m };
            }
        }
        z.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..classes {
            match grad.as_mut() {
                Some(g) => {
                    let out = &mut g[c * cs + b * a..c * cs + b * a + a];
                    for (((o, s), &v), &m) in out.iter_mut().zip(z.iter_mut()).zip(row(c)).zip(&max) {
                        *o = (v - m).exp();
                        *s += *o;
                    }
                }
                None => {
                    for ((s, &v), &m) in z.iter_mut().zip(row(c)).zip(&max) {
                        *s += (v - m).exp();
                    }
                }
            }
        }
        let item: f64 = (0..a)
            .map(|p| z[p].as_f64().ln() + max[p].as_f64() - row(target)[p].as_f64())
            .sum();
        total += item / a as f64;
        if let Some(g) = grad.as_mut() {
            z.iter_mut().for_each(|v| *v = inv_a / *v);
            for c in 0..classes {
                let out = &mut g[c * cs + b * a..c * cs + b * a + a];
                for (o, &s) in out.iter_mut().zip(&z) {
                    *o *= s;
                }
                if c == target {
                    out.iter_mut().for_each(|o| *o -= inv_a);
                }
            }
        }
    }
    (total, grad)
}

fn map_term(map: &ResponseMap, class: usize) -> f64 {
    let batch = Batch::<f64> {
        channels: map.classes,
        batch: 1,
        height: map.height,
        width: map.width,
        data: map.logits.iter().map(|&v| v as f64).collect(),
    };
    patch_cross_entropy(&batch, &[class], false).0
}

fn check_maps(maps: &[ResponseMap], expected: usize, what: &str) -> Result<()> {
    if maps.len() != expected {
        return Err(Error::validation(format!(
            "{what}: expected one map per transformation ({expected}), got {}",
            maps.len()
        )));
    }
    if let Some(m) = maps.iter().find(|m| m.classes != expected + 1) {
        return Err(Error::validation(format!(
            "{what}: maps need {} classes, got {}",
            expected + 1,
            m.classes
        )));
    }
    Ok(())
}

/// Discriminator objective: real maps of `T_i(x)` to class `i`, fake maps of
/// `T_i(x_fake)` to class 0. `real_maps[i-1]` belongs to `T_i`.
pub fn discriminator_loss(real_maps: &[ResponseMap], fake_maps: &[ResponseMap]) -> Result<f64> {
    let m = real_maps.len();
    check_maps(real_maps, m, "real maps")?;
    check_maps(fake_maps, m, "fake maps")?;
    Ok(real_maps
        .iter()
        .zip(fake_maps)
        .enumerate()
        .map(|(i, (r, f))| map_term(r, i + 1) + map_term(f, 0))
        .sum())
}

/// Generator adversarial objective: fake maps of `T_i(x_fake)` to class `i`.
pub fn generator_adv_loss(fake_maps: &[ResponseMap]) -> Result<f64> {
    check_maps(fake_maps, fake_maps.len(), "fake maps")?;
    Ok(fake_maps
        .iter()
        .enumerate()
        .map(|(i, f)| map_term(f, i + 1))
        .sum())
}

/// Mean squared error between a reconstruction and its target.
pub fn reconstruction_loss(recon: &Planes, target: &Planes) -> Result<f64> {
    recon.mse(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_maps(m: usize, side: usize) -> Vec<ResponseMap> {
        (0..m)
            .map(|_| ResponseMap {
                classes: m + 1,
                height: side,
                width: side,
                logits: vec![0.0; (m + 1) * side * side],
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let maps = zero_maps(1, 1);
        let d = discriminator_loss(&maps, &maps).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((generator_adv_loss(&maps).unwrap() - 2f64.ln()).abs() < 1e-15);

        let big = zero_maps(54, 2);
        let per_term = generator_adv_loss(&big).unwrap() / 54.0;
        assert!((per_term - 55f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_vanish() {
        let mut real = zero_maps(2, 2);
        let mut fake = zero_maps(2, 2);
        for (i, (r, f)) in real.iter_mut().zip(fake.iter_mut()).enumerate() {
            r.logits[(i + 1) * 4..(i + 2) * 4].fill(60.0);
            f.logits[..4].fill(60.0);
        }
        assert!(discriminator_loss(&real, &fake).unwrap() < 1e-20);
    }

    #[test]
    fn missing_transformation_is_rejected() {
        let real = zero_maps(3, 2);
        let fake = zero_maps(3, 2);
        assert!(discriminator_loss(&real[..2], &fake).is_err());
    }

    #[test]
    fn generator_loss_falls_as_target_logit_rises() {
        let mut maps = zero_maps(2, 2);
        let mut last = generator_adv_loss(&maps).unwrap();
        for step in 1..6 {
            for (i, m) in maps.iter_mut().enumerate() {
                m.logits[(i + 1) * 4..(i + 2) * 4].fill(step as f32 * 0.5);
            }
            let now = generator_adv_loss(&maps).unwrap();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn gradient_matches_softmax_minus_onehot() {
        let logits = Batch {
            channels: 3,
            batch: 1,
            height: 1,
            width: 2,
            data: vec![0.5f64, -1.0, 2.0, 0.0, 1.0, 1.0],
        };
        let (_, g) = patch_cross_entropy(&logits, &[2], true);
        let g = g.unwrap();
        // position 0: logits (0.5, 2.0, 1.0)
        let z = 0.5f64.exp() + 2f64.exp() + 1f64.exp();
        assert!((g[0] - 0.5f64.exp() / z / 2.0).abs() < 1e-12);
        assert!((g[4] - (1f64.exp() / z - 1.0) / 2.0).abs() < 1e-12);
    }
}
