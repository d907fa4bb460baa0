//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use htdg::nets::{Batch, Head, Network};
use htdg::trainer::{discriminator_objective, generator_objective, ReconTerm, View};
use htdg::transforms::{enumerate_transforms, TransformPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Batch<f64> {
    let mut b = Batch::zeros(c, 1, h, w);
    b.data.iter_mut().for_each(|v| *v = rng.random_range(-0.9..0.9));
    b
}

fn flat(tensors: &[Vec<f64>]) -> Vec<f64> {
    tensors.iter().flatten().copied().collect()
}

/// `|a - f| / max(|a|, |f|)` over whole gradient vectors.
pub fn relative_error(a: &[f64], f: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(f).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(f)).max(1e-300)
}

fn central_difference<N>(net: &mut N, tensors: fn(&mut N) -> Vec<&mut Vec<f64>>, loss: impl Fn(&N) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let shapes: Vec<usize> = tensors(net).iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, len) in shapes.into_iter().enumerate() {
        for j in 0..len {
            let orig = tensors(net)[ti][j];
            tensors(net)[ti][j] = orig + h;
            let up = loss(net);
            tensors(net)[ti][j] = orig - h;
            let down = loss(net);
            tensors(net)[ti][j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Analytic versus finite-difference gradients of the discriminator loss
/// (w.r.t. discriminator parameters) and of the generator objective (w.r.t.
/// generator parameters) for 2-block, 2-channel nets on an 8x8 input.
/// Returns the two relative errors.
pub fn gradient_check(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w, hidden, blocks) = (2, 8, 8, 4, 2);
    let group = enumerate_transforms(false);
    let picks = [0usize, 7, 20, 41];
    let plans: Vec<TransformPlan> = picks
        .iter()
        .map(|&j| TransformPlan::new(group[j], h, w).unwrap())
        .collect();
    let views: Vec<View> = plans.iter().enumerate().map(|(j, p)| (p, j + 1)).collect();
    let classes = picks.len() + 1;

    let mut d: Network<f64> = Network::init(c, hidden, classes, blocks, Head::Logits, &mut rng);
    let mut g: Network<f64> = Network::init(c + 1, hidden, c, blocks, Head::Tanh, &mut rng);
    let real = random_batch(c, h, w, &mut rng);
    let fake = random_batch(c, h, w, &mut rng);
    let g_input = random_batch(c + 1, h, w, &mut rng);
    let base = random_batch(c, h, w, &mut rng).data;
    let r_input = random_batch(c + 1, h, w, &mut rng);
    let r_base = random_batch(c, h, w, &mut rng).data;
    let target = random_batch(c, h, w, &mut rng).data;
    let alpha = 10.0;

    // Discriminator side; a chunk of 3 exercises uneven batching.
    let d_loss = |d: &Network<f64>| {
        discriminator_objective(d, &real, Some(&fake), &views, 3, None, None).unwrap()
    };
    let mut grads = d.zero_grads();
    discriminator_objective(&d, &real, Some(&fake), &views, 3, Some(&mut grads), None).unwrap();
    let analytic = flat(&grads.tensors);
    let numeric = central_difference(&mut d, Network::trainable_mut, d_loss);
    let d_err = relative_error(&analytic, &numeric);

    let g_loss = |g: &Network<f64>| {
        let term = ReconTerm {
            input: &r_input,
            base: Some(&r_base),
            target: &target,
            alpha,
        };
        let (adv, rec) =
            generator_objective(g, &d, &g_input, Some(&base), &views, 3, Some(term), None).unwrap();
        adv + alpha * rec
    };
    let mut grads = g.zero_grads();
    let term = ReconTerm {
        input: &r_input,
        base: Some(&r_base),
        target: &target,
        alpha,
    };
    generator_objective(&g, &d, &g_input, Some(&base), &views, 3, Some(term), Some(&mut grads)).unwrap();
    let analytic = flat(&grads.tensors);
    let numeric = central_difference(&mut g, Network::trainable_mut, g_loss);
    let g_err = relative_error(&analytic, &numeric);
    (d_err, g_err)
}
