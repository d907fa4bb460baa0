//! Coarse-to-fine training of the per-scale generator/discriminator pairs.
//!
//! Scale `n` is trained with every coarser scale frozen. Each iteration draws
//! a fake image through the frozen cascade plus the current generator, then
//! alternates discriminator updates (real views of `T_i` to class `i`, fake
//! views to class 0) and generator updates (fake views to class `i`, plus the
//! weighted reconstruction of the fixed-noise path).

pub mod adam;
pub mod loss;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgpipe::{build_pyramid, upsample_planes, Image, Planes, Pyramid, RECEPTIVE_FIELD};
use crate::nets::{
    attach_condition, batch_of, generator_forward, Batch, Head, NetGrads, Network, NormMode,
    NormStats, DEFAULT_BLOCKS,
};
use crate::real::Real;
use crate::transforms::{enumerate_transforms, TransformDescriptor, TransformPlan};
use adam::Adam;
use loss::patch_cross_entropy;

/// Ablation variants of the method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The complete method.
    Full,
    /// No generator and no fake class: a transformation classifier only.
    A,
    /// Identity as the only transformation: a plain real/fake patch GAN.
    B,
    /// Real/fake discriminator fed a random transformation per step.
    C,
    /// Single scale at 100x100.
    D100,
    /// Single scale at 20x20.
    E20,
    /// No model: mean squared error against the training images.
    F,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D100,
        Variant::E20,
        Variant::F,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D100 => "d100",
            Variant::E20 => "e20",
            Variant::F => "f",
        }
    }

    pub fn has_generator(self) -> bool {
        !matches!(self, Variant::A | Variant::F)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown variant `{s}`")))
    }
}

/// How a discriminator output is turned into the vote for transformation `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteRule {
    /// Drop the fake logit, softmax over the rest, read class `j + 1`.
    DropFake,
    /// No fake class: softmax over all outputs, read class `j`.
    AllClasses,
    /// Two-way real/fake softmax, read the real class.
    RealProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub r: f64,
    pub max_resolution: usize,
    pub min_resolution: usize,
    pub iters_per_scale: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    /// Noise amplitude at the coarsest scale.
    pub sigma0: f64,
    /// Transformed views per forward batch.
    pub transform_chunk: usize,
    pub hidden_width: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r: 0.75,
            max_resolution: 64,
            min_resolution: 12,
            iters_per_scale: 2000,
            d_steps: 3,
            g_steps: 3,
            lr: 0.0005,
            beta1: 0.5,
            beta2: 0.999,
            alpha: 100.0,
            sigma0: 1.0,
            transform_chunk: 14,
            hidden_width: 32,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.r > 0.0 && self.r < 1.0) {
            return bad(format!("r={} must lie in (0, 1)", self.r));
        }
        if self.min_resolution < RECEPTIVE_FIELD || self.min_resolution > self.max_resolution {
            return bad(format!(
                "need {RECEPTIVE_FIELD} <= min_resolution ({}) <= max_resolution ({})",
                self.min_resolution, self.max_resolution
            ));
        }
        for (name, v) in [
            ("iters_per_scale", self.iters_per_scale),
            ("d_steps", self.d_steps),
            ("g_steps", self.g_steps),
            ("transform_chunk", self.transform_chunk),
            ("hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr", self.lr), ("alpha", self.alpha), ("sigma0", self.sigma0)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name}={v} must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name}={v} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// The configuration with variant-implied overrides applied (single
    /// scale at a fixed resolution for d100/e20).
    pub fn for_variant(&self) -> TrainConfig {
        let mut cfg = self.clone();
        let side = match self.variant {
            Variant::D100 => 100,
            Variant::E20 => 20,
            _ => return cfg,
        };
        cfg.max_resolution = side;
        cfg.min_resolution = side;
        cfg
    }
}

/// Everything about a stack except its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    /// Number of training images.
    pub k: usize,
    pub channels: usize,
    /// Transformations scored per scale.
    pub transforms: usize,
    pub r: f64,
    /// `[height, width]` per scale, coarsest first.
    pub sizes: Vec<[usize; 2]>,
    /// Identifiers (usually paths) of the training images, in index order.
    pub images: Vec<String>,
    pub config: TrainConfig,
}

impl StackMeta {
    pub fn new(k: usize, channels: usize, sizes: Vec<[usize; 2]>, images: Vec<String>, config: TrainConfig) -> Self {
        let mut meta = StackMeta {
            k,
            channels,
            transforms: 0,
            r: config.r,
            sizes,
            images,
            config,
        };
        meta.transforms = meta.score_transforms().len();
        meta
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn color_mode(&self) -> bool {
        self.channels == 3
    }

    /// The transformations whose votes make up the score, in class order.
    pub fn score_transforms(&self) -> Vec<TransformDescriptor> {
        match self.variant() {
            Variant::B => vec![TransformDescriptor::IDENTITY],
            _ => enumerate_transforms(self.color_mode()),
        }
    }

    pub fn discriminator_classes(&self) -> usize {
        let m = self.score_transforms().len();
        match self.vote_rule() {
            VoteRule::DropFake => m + 1,
            VoteRule::AllClasses => m,
            VoteRule::RealProbability => 2,
        }
    }

    pub fn vote_rule(&self) -> VoteRule {
        match self.variant() {
            Variant::A => VoteRule::AllClasses,
            Variant::B | Variant::C => VoteRule::RealProbability,
            _ => VoteRule::DropFake,
        }
    }

    /// Output class assigned to real views of score transformation `j`.
    pub fn real_class(&self, j: usize) -> usize {
        match self.vote_rule() {
            VoteRule::DropFake => j + 1,
            VoteRule::AllClasses => j,
            VoteRule::RealProbability => 1,
        }
    }

    pub fn generator_inputs(&self) -> usize {
        self.channels + usize::from(self.k > 1)
    }

    pub fn size(&self, n: usize) -> (usize, usize) {
        (self.sizes[n][0], self.sizes[n][1])
    }

    pub fn finest_index(&self) -> usize {
        self.sizes.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModel {
    pub generator: Option<Network<f32>>,
    pub discriminator: Network<f32>,
    /// Noise amplitude used when sampling at this scale.
    pub sigma: f64,
}

/// Per-scale parameters, noise amplitudes, the fixed reconstruction noise and
/// run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelStack {
    pub meta: StackMeta,
    pub scales: Vec<ScaleModel>,
    /// Fixed coarsest-scale input of the reconstruction path.
    pub z_star: Planes,
    /// Scales `0..trained_scales` are trained and frozen.
    pub trained_scales: usize,
}

pub(crate) const STREAM_INIT: u64 = 1 << 40;
pub(crate) const STREAM_Z_STAR: u64 = 2 << 40;
pub(crate) const STREAM_TRAIN: u64 = 3 << 40;
pub const STREAM_SUBSET: u64 = 4 << 40;

/// Independent random stream `key` of `seed`.
pub fn stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

fn train_stream(seed: u64, n: usize, iteration: usize) -> ChaCha8Rng {
    stream(seed, STREAM_TRAIN | ((n as u64) << 24) | iteration as u64)
}

/// Standard Gaussian noise scaled by `sigma`.
pub fn gaussian<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, sigma: f64, rng: &mut R) -> Planes {
    let data = (0..channels * height * width)
        .map(|_| (sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Planes::new(channels, height, width, data).expect("length matches shape")
}

impl ModelStack {
    /// Freshly initialized, untrained stack.
    pub fn new(meta: StackMeta) -> Result<Self> {
        meta.config.validate()?;
        let cfg = &meta.config;
        let has_g = meta.variant().has_generator();
        let scales = (0..meta.sizes.len())
            .map(|n| {
                let mut rng = stream(cfg.seed, STREAM_INIT | n as u64);
                let generator = has_g.then(|| {
                    Network::init(
                        meta.generator_inputs(),
                        cfg.hidden_width,
                        meta.channels,
                        DEFAULT_BLOCKS,
                        Head::Tanh,
                        &mut rng,
                    )
                });
                let discriminator = Network::init(
                    meta.channels,
                    cfg.hidden_width,
                    meta.discriminator_classes(),
                    DEFAULT_BLOCKS,
                    Head::Logits,
                    &mut rng,
                );
                ScaleModel {
                    generator,
                    discriminator,
                    sigma: if n == 0 { cfg.sigma0 } else { 0.0 },
                }
            })
            .collect();
        let (h, w) = meta.size(0);
        let z_star = gaussian(meta.channels, h, w, 1.0, &mut stream(cfg.seed, STREAM_Z_STAR));
        Ok(ModelStack {
            meta,
            scales,
            z_star,
            trained_scales: 0,
        })
    }

    /// All-zero parameters at every scale, marked as trained. Generators then
    /// output zero residuals and discriminators uniform class probabilities.
    pub fn zeros(meta: StackMeta) -> Result<Self> {
        let mut stack = ModelStack::new(meta)?;
        let meta = &stack.meta;
        for s in &mut stack.scales {
            if s.generator.is_some() {
                s.generator = Some(Network::zeros(
                    meta.generator_inputs(),
                    meta.config.hidden_width,
                    meta.channels,
                    DEFAULT_BLOCKS,
                    Head::Tanh,
                ));
            }
            s.discriminator = Network::zeros(
                meta.channels,
                meta.config.hidden_width,
                meta.discriminator_classes(),
                DEFAULT_BLOCKS,
                Head::Logits,
            );
        }
        stack.trained_scales = stack.scales.len();
        Ok(stack)
    }

    pub fn is_trained(&self) -> bool {
        self.trained_scales == self.scales.len()
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::Sequencing(format!(
                "stack has {} of {} scales trained",
                self.trained_scales,
                self.scales.len()
            )))
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.meta.k {
            return Err(Error::validation(format!(
                "image index {i} out of range for k={}",
                self.meta.k
            )));
        }
        Ok(())
    }

    fn generator(&self, n: usize) -> Result<&Network<f32>> {
        self.scales[n].generator.as_ref().ok_or_else(|| {
            Error::validation(format!("variant {} has no generator", self.meta.variant()))
        })
    }
}

/// Attaches the conditioning channel when the stack has several images.
fn condition(meta: &StackMeta, x: &Planes, i: usize) -> Result<Planes> {
    if meta.k > 1 {
        attach_condition(x, i, meta.k)
    } else {
        Ok(x.clone())
    }
}

/// One generator step at scale `n`: residual on top of `base` (none at the
/// coarsest scale), where the generator sees `noise + base`.
fn generate_at(stack: &ModelStack, n: usize, i: usize, noise: &Planes, base: Option<&Planes>) -> Result<Planes> {
    let input = match base {
        Some(b) => noise.add(b)?,
        None => noise.clone(),
    };
    let out = generator_forward(stack.generator(n)?, &condition(&stack.meta, &input, i)?)?;
    match base {
        Some(b) => out.add(b),
        None => Ok(out),
    }
}

/// Random sample at scale `top` drawn through scales `0..=top`.
fn sample_cascade<R: Rng + ?Sized>(stack: &ModelStack, i: usize, top: usize, rng: &mut R) -> Result<Planes> {
    let c = stack.meta.channels;
    let mut cur: Option<Planes> = None;
    for n in 0..=top {
        let (h, w) = stack.meta.size(n);
        let base = cur.as_ref().map(|p| upsample_planes(p, h, w));
        let noise = gaussian(c, h, w, stack.scales[n].sigma, rng);
        cur = Some(generate_at(stack, n, i, &noise, base.as_ref())?);
    }
    Ok(cur.expect("at least one scale"))
}

/// The fixed-noise path: `z*` at scale 0, no noise above.
pub fn reconstruction_pass(stack: &ModelStack, i: usize, up_to: usize) -> Result<Planes> {
    stack.check_index(i)?;
    if up_to >= stack.trained_scales {
        return Err(Error::Sequencing(format!(
            "reconstruction up to scale {up_to} needs it trained ({} trained)",
            stack.trained_scales
        )));
    }
    recon_unchecked(stack, i, up_to)
}

fn recon_unchecked(stack: &ModelStack, i: usize, up_to: usize) -> Result<Planes> {
    let mut cur = generate_at(stack, 0, i, &stack.z_star, None)?;
    for n in 1..=up_to {
        let (h, w) = stack.meta.size(n);
        let base = upsample_planes(&cur, h, w);
        let zero = Planes::zeros(stack.meta.channels, h, w);
        cur = generate_at(stack, n, i, &zero, Some(&base))?;
    }
    Ok(cur)
}

/// Noise amplitude for scale `n`: the configured constant at the coarsest
/// scale, otherwise the mean over images of the RMSE between the upsampled
/// coarser reconstruction and the real level.
pub fn noise_sigma(stack: &ModelStack, n: usize, targets: &[&Image]) -> Result<f64> {
    if n == 0 {
        return Ok(stack.meta.config.sigma0);
    }
    if stack.trained_scales < n {
        return Err(Error::Sequencing(format!(
            "noise amplitude at scale {n} needs scales below it trained ({} trained)",
            stack.trained_scales
        )));
    }
    if targets.len() != stack.meta.k {
        return Err(Error::validation(format!(
            "need one target per training image ({}), got {}",
            stack.meta.k,
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, x) in targets.iter().enumerate() {
        let recon = reconstruction_pass(stack, i, n - 1)?;
        let up = upsample_planes(&recon, x.height, x.width);
        total += up.mse(x)?.sqrt();
    }
    Ok(total / targets.len() as f64)
}

/// Draws one image at the finest scale.
pub fn generate_sample<R: Rng + ?Sized>(stack: &ModelStack, i: usize, rng: &mut R) -> Result<Image> {
    stack.require_trained()?;
    stack.check_index(i)?;
    let top = stack.meta.finest_index();
    Image::from_clamped(sample_cascade(stack, i, top, rng)?)
}

/// A transformed view fed to the discriminator and its target class.
pub type View<'a> = (&'a TransformPlan, usize);

/// Transformed copies of a one-item batch, one per view.
fn transformed_batch<T: Real>(img: &Batch<T>, views: &[View]) -> Result<Batch<T>> {
    let mut out = Batch::zeros(img.channels, views.len(), img.height, img.width);
    let a = img.area();
    let stride = views.len() * a;
    for (b, (plan, _)) in views.iter().enumerate() {
        plan.forward_into(&img.data, img.channels, &mut out.data[b * a..], stride)?;
    }
    Ok(out)
}

/// Discriminator objective: summed patch-mean cross-entropies of the real
/// views against their classes and, when given, the fake views against
/// class 0. Parameter gradients accumulate into `grads`; the normalization
/// statistics of the real passes are appended to `stats`.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_objective<T: Real>(
    d: &Network<T>,
    real: &Batch<T>,
    fake: Option<&Batch<T>>,
    views: &[View],
    chunk: usize,
    mut grads: Option<&mut NetGrads<T>>,
    mut stats: Option<&mut Vec<NormStats<T>>>,
) -> Result<f64> {
    let mut total = 0.0;
    for group in views.chunks(chunk.max(1)) {
        let real_targets: Vec<usize> = group.iter().map(|v| v.1).collect();
        let fake_targets = vec![0; group.len()];
        let passes = [(Some(real), &real_targets), (fake, &fake_targets)];
        for (pass, (img, targets)) in passes.into_iter().enumerate() {
            let Some(img) = img else { continue };
            let (out, trace) = d.forward_traced(transformed_batch(img, group)?)?;
            let (loss, grad) = patch_cross_entropy(&out, targets, grads.is_some());
            total += loss;
            if pass == 0 {
                if let Some(s) = stats.as_deref_mut() {
                    s.push(trace.norm_stats());
                }
            }
            if let (Some(g), Some(grad)) = (grads.as_deref_mut(), grad) {
                d.backward(&trace, grad, Some(g), false);
            }
        }
    }
    Ok(total)
}

/// Reconstruction term of the generator objective.
pub struct ReconTerm<'a, T> {
    pub input: &'a Batch<T>,
    pub base: Option<&'a [T]>,
    pub target: &'a [T],
    pub alpha: f64,
}

/// Generator objective `adv + alpha * recon`. The fake is `G(input) + base`;
/// each view of it is pushed toward its class. Returns `(adv, recon)` and
/// accumulates generator gradients into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Real>(
    g: &Network<T>,
    d: &Network<T>,
    input: &Batch<T>,
    base: Option<&[T]>,
    views: &[View],
    chunk: usize,
    recon: Option<ReconTerm<T>>,
    mut grads: Option<&mut NetGrads<T>>,
) -> Result<(f64, f64)> {
    let want = grads.is_some();
    let (out, trace) = g.forward_traced(input.clone())?;
    let mut fake = out;
    if let Some(b) = base {
        fake.data.iter_mut().zip(b).for_each(|(v, &b)| *v += b);
    }
    let a = fake.area();
    let mut adv = 0.0;
    let mut grad_fake = want.then(|| vec![T::zero(); fake.data.len()]);
    for group in views.chunks(chunk.max(1)) {
        let targets: Vec<usize> = group.iter().map(|v| v.1).collect();
        let (logits, d_trace) = d.forward_traced(transformed_batch(&fake, group)?)?;
        let (loss, grad) = patch_cross_entropy(&logits, &targets, want);
        adv += loss;
        if let (Some(gf), Some(grad)) = (grad_fake.as_mut(), grad) {
            let dx = d.backward(&d_trace, grad, None, true).expect("input gradient requested");
            let stride = group.len() * a;
            for (b, (plan, _)) in group.iter().enumerate() {
                plan.backward_into(&dx[b * a..], stride, fake.channels, gf)?;
            }
        }
    }
    if let (Some(gr), Some(gf)) = (grads.as_deref_mut(), grad_fake) {
        g.backward(&trace, gf, Some(gr), false);
    }
    let mut mse = 0.0;
    if let Some(rt) = recon {
        let (out, trace) = g.forward_traced(rt.input.clone())?;
        let mut r = out.data;
        if let Some(b) = rt.base {
            r.iter_mut().zip(b).for_each(|(v, &b)| *v += b);
        }
        if r.len() != rt.target.len() {
            return Err(Error::validation("reconstruction target shape mismatch"));
        }
        let p = r.len() as f64;
        mse = r.iter().zip(rt.target).map(|(&v, &t)| (v - t).as_f64().powi(2)).sum::<f64>() / p;
        if let Some(gr) = grads.as_deref_mut() {
            let k = T::lit(2.0 * rt.alpha / p);
            let grad: Vec<T> = r.iter().zip(rt.target).map(|(&v, &t)| k * (v - t)).collect();
            g.backward(&trace, grad, Some(gr), false);
        }
    }
    Ok((adv, mse))
}

fn planes_batch(p: &Planes) -> Batch<f32> {
    batch_of(&[p]).expect("one item")
}

fn ensure_finite(v: f64, scale: usize, iteration: usize, what: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            scale,
            iteration,
            what,
        })
    }
}

/// Trains scale `n` of `stack` on the images' pyramids. Scales below `n` must
/// be trained; they are read but never modified.
pub fn train_scale(
    stack: &mut ModelStack,
    n: usize,
    pyramids: &[Pyramid],
    log: &mut dyn FnMut(&str),
) -> Result<()> {
    if n != stack.trained_scales || n >= stack.scales.len() {
        return Err(Error::Sequencing(format!(
            "cannot train scale {n}: {} of {} scales trained",
            stack.trained_scales,
            stack.scales.len()
        )));
    }
    let meta = stack.meta.clone();
    let cfg = &meta.config;
    if pyramids.len() != meta.k {
        return Err(Error::validation(format!(
            "expected {} pyramids, got {}",
            meta.k,
            pyramids.len()
        )));
    }
    let (h, w) = meta.size(n);
    let targets: Vec<&Image> = pyramids
        .iter()
        .map(|p| {
            p.levels
                .get(n)
                .filter(|l| l.height == h && l.width == w && l.channels == meta.channels)
                .ok_or_else(|| Error::validation(format!("pyramid level {n} does not match {h}x{w}")))
        })
        .collect::<Result<_>>()?;

    // Warm start from the scale below; same widths throughout.
    if n > 0 {
        let below = stack.scales[n - 1].clone();
        stack.scales[n].generator = below.generator;
        stack.scales[n].discriminator = below.discriminator;
    }
    let has_g = meta.variant().has_generator();
    if has_g {
        stack.scales[n].sigma = noise_sigma(stack, n, &targets)?;
    }
    let sigma = stack.scales[n].sigma;

    let group = meta.score_transforms();
    let plans = group
        .iter()
        .map(|t| TransformPlan::new(*t, h, w))
        .collect::<Result<Vec<_>>>()?;
    let all_views: Vec<View> = plans.iter().enumerate().map(|(j, p)| (p, meta.real_class(j))).collect();

    // Fixed reconstruction inputs per image.
    let recon_inputs: Vec<(Batch<f32>, Option<Vec<f32>>)> = if has_g {
        (0..meta.k)
            .map(|i| {
                if n == 0 {
                    Ok((planes_batch(&condition(&meta, &stack.z_star, i)?), None))
                } else {
                    let below = reconstruction_pass(stack, i, n - 1)?;
                    let base = upsample_planes(&below, h, w);
                    Ok((planes_batch(&condition(&meta, &base, i)?), Some(base.data)))
                }
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let reals: Vec<Batch<f32>> = targets.iter().map(|x| planes_batch(x)).collect();

    let mut current = stack.scales[n].clone();
    let mut adam_d = Adam::new(&current.discriminator, cfg.lr, cfg.beta1, cfg.beta2);
    let mut adam_g = current
        .generator
        .as_ref()
        .map(|g| Adam::new(g, cfg.lr, cfg.beta1, cfg.beta2));

    let (mut d_loss, mut g_adv, mut recon) = (0.0, 0.0, 0.0);
    for t in 0..cfg.iters_per_scale {
        let mut rng = train_stream(cfg.seed, n, t);
        let i = if meta.k > 1 { rng.random_range(0..meta.k) } else { 0 };
        let random_view;
        let views: &[View] = if meta.variant() == Variant::C {
            random_view = [all_views[rng.random_range(0..all_views.len())]];
            &random_view
        } else {
            &all_views
        };

        // Fake input through the frozen cascade.
        let fake_setup = if has_g {
            let base = if n == 0 {
                None
            } else {
                Some(upsample_planes(&sample_cascade(stack, i, n - 1, &mut rng)?, h, w))
            };
            let noise = gaussian(meta.channels, h, w, sigma, &mut rng);
            let input = match &base {
                Some(b) => noise.add(b)?,
                None => noise,
            };
            Some((planes_batch(&condition(&meta, &input, i)?), base))
        } else {
            None
        };
        let fake = match (&fake_setup, &current.generator) {
            (Some((input, base)), Some(g)) => {
                let mut out = g.forward(input, NormMode::Instance)?;
                if let Some(b) = base {
                    out.data.iter_mut().zip(&b.data).for_each(|(v, &b)| *v += b);
                }
                Some(out)
            }
            _ => None,
        };

        for _ in 0..cfg.d_steps {
            let d = &mut current.discriminator;
            let mut grads = d.zero_grads();
            let mut stats = Vec::new();
            d_loss = discriminator_objective(
                d,
                &reals[i],
                fake.as_ref(),
                views,
                cfg.transform_chunk,
                Some(&mut grads),
                Some(&mut stats),
            )?;
            ensure_finite(d_loss, n, t, "discriminator loss")?;
            if !grads.is_finite() {
                return Err(Error::NonFinite {
                    scale: n,
                    iteration: t,
                    what: "discriminator gradient",
                });
            }
            adam_d.apply(d, &grads);
            for s in &stats {
                d.absorb_statistics(s);
            }
        }

        if let (Some((input, base)), Some(g), Some(adam)) =
            (&fake_setup, current.generator.as_mut(), adam_g.as_mut())
        {
            let (r_input, r_base) = &recon_inputs[i];
            for _ in 0..cfg.g_steps {
                let mut grads = g.zero_grads();
                let term = ReconTerm {
                    input: r_input,
                    base: r_base.as_deref(),
                    target: &reals[i].data,
                    alpha: cfg.alpha,
                };
                (g_adv, recon) = generator_objective(
                    g,
                    &current.discriminator,
                    input,
                    base.as_ref().map(|b| b.data.as_slice()),
                    views,
                    cfg.transform_chunk,
                    Some(term),
                    Some(&mut grads),
                )?;
                ensure_finite(g_adv + recon, n, t, "generator loss")?;
                if !grads.is_finite() {
                    return Err(Error::NonFinite {
                        scale: n,
                        iteration: t,
                        what: "generator gradient",
                    });
                }
                adam.apply(g, &grads);
            }
        }

        if (t + 1) % 100 == 0 || t + 1 == cfg.iters_per_scale {
            log(&format!(
                "scale {n} iter {} d_loss {d_loss:.5} g_adv {g_adv:.5} recon {recon:.6} sigma {sigma:.5}",
                t + 1
            ));
        }
    }
    stack.scales[n] = current;
    stack.trained_scales = n + 1;
    Ok(())
}

/// Builds the pyramids of already preprocessed training images and trains a
/// full stack coarse to fine.
pub fn train_stack(
    images: &[Image],
    ids: Vec<String>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<ModelStack> {
    cfg.validate()?;
    if cfg.variant == Variant::F {
        return Err(Error::Config("variant f has no trainable model".into()));
    }
    let first = images
        .first()
        .ok_or_else(|| Error::validation("no training images"))?;
    if images.iter().any(|im| !im.same_shape(first)) {
        return Err(Error::validation("training images differ in shape"));
    }
    if ids.len() != images.len() {
        return Err(Error::validation("one identifier per training image"));
    }
    let pyramids = images
        .iter()
        .map(|im| build_pyramid(im, cfg.r, cfg.min_resolution))
        .collect::<Result<Vec<_>>>()?;
    let sizes = pyramids[0].sizes().into_iter().map(|(h, w)| [h, w]).collect();
    let meta = StackMeta::new(images.len(), first.channels, sizes, ids, cfg.clone());
    let mut stack = ModelStack::new(meta)?;
    for n in 0..stack.scales.len() {
        train_scale(&mut stack, n, &pyramids, log)?;
    }
    Ok(stack)
}
