//! Per-scale generator and discriminator: five 3x3 conv blocks, the first
//! four normalized with LeakyReLU(0.2), the last either `tanh` (generator)
//! or raw logits (discriminator). Five 3x3 layers give an 11x11 receptive
//! field.

mod kernels;
pub mod layers;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgpipe::Planes;
use crate::real::Real;

pub use layers::Batch;
use layers::{
    conv_backward, conv_forward, fixed_norm_forward, instance_norm_backward,
    instance_norm_forward, leaky_relu, NormTrace, LEAK,
};

pub const DEFAULT_BLOCKS: usize = 5;
pub const DEFAULT_WIDTH: usize = 32;
pub const INIT_STD: f64 = 0.02;
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Tanh,
    Logits,
}

/// How normalization layers obtain their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of each input over its own spatial positions.
    Instance,
    /// Stored running averages; the network becomes strictly local.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub cin: usize,
    pub cout: usize,
    /// `cout x cin x 3 x 3`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm: Option<NormParams<T>>,
}

impl<T: Real> ConvBlock<T> {
    fn zeros(cin: usize, cout: usize, normalized: bool) -> Self {
        ConvBlock {
            cin,
            cout,
            weight: vec![T::zero(); cout * cin * 9],
            bias: vec![T::zero(); cout],
            norm: normalized.then(|| NormParams {
                gamma: vec![T::one(); cout],
                beta: vec![T::zero(); cout],
                running_mean: vec![T::zero(); cout],
                running_var: vec![T::one(); cout],
            }),
        }
    }
}

/// Fully convolutional network: generator or discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Head,
}

/// Gradients with the same layout as the trainable tensors of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> NetGrads<T> {
    pub fn scale(&mut self, k: T) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Intermediate values kept for the backward pass.
pub struct Trace<T> {
    blocks: Vec<BlockTrace<T>>,
}

struct BlockTrace<T> {
    input: Batch<T>,
    norm: Option<NormTrace<T>>,
    /// Post-activation output.
    output: Vec<T>,
}

impl<T: Real> Network<T> {
    /// All-zero weights and biases, unit norm scale.
    pub fn zeros(cin: usize, hidden: usize, cout: usize, blocks: usize, head: Head) -> Self {
        assert!(blocks >= 1, "a network needs at least one block");
        let blocks = (0..blocks)
            .map(|b| {
                let i = if b == 0 { cin } else { hidden };
                let o = if b + 1 == blocks { cout } else { hidden };
                ConvBlock::zeros(i, o, b + 1 < blocks)
            })
            .collect();
        Network { blocks, head }
    }

    /// Gaussian weights with standard deviation 0.02, zero biases.
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        hidden: usize,
        cout: usize,
        blocks: usize,
        head: Head,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(cin, hidden, cout, blocks, head);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for block in &mut net.blocks {
            for w in &mut block.weight {
                *w = T::lit(normal.sample(rng));
            }
        }
        net
    }

    pub fn generator(cin: usize, hidden: usize, cout: usize) -> Self {
        Self::zeros(cin, hidden, cout, DEFAULT_BLOCKS, Head::Tanh)
    }

    pub fn discriminator(cin: usize, hidden: usize, classes: usize) -> Self {
        Self::zeros(cin, hidden, classes, DEFAULT_BLOCKS, Head::Logits)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].cin
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().expect("non-empty").cout
    }

    /// Hidden width (equals the output width for single-block networks).
    pub fn hidden(&self) -> usize {
        self.blocks[0].cout
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Network {
            head: self.head,
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    cin: b.cin,
                    cout: b.cout,
                    weight: conv(&b.weight),
                    bias: conv(&b.bias),
                    norm: b.norm.as_ref().map(|n| NormParams {
                        gamma: conv(&n.gamma),
                        beta: conv(&n.beta),
                        running_mean: conv(&n.running_mean),
                        running_var: conv(&n.running_var),
                    }),
                })
                .collect(),
        }
    }

    /// Trainable tensors in a fixed order: per block weight, bias and (when
    /// normalized) gamma, beta.
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(n) = &mut b.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(n) = &b.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    /// Every stored tensor (trainable plus running statistics), for
    /// serialization.
    pub fn all_tensors(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(n) = &b.norm {
                out.extend([&n.gamma, &n.beta, &n.running_mean, &n.running_var]);
            }
        }
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(n) = &mut b.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
                out.push(&mut n.running_mean);
                out.push(&mut n.running_var);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.all_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> NetGrads<T> {
        NetGrads {
            tensors: self
                .trainable()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all_tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Batch<T>) -> Result<()> {
        if x.channels != self.in_channels() {
            return Err(Error::validation(format!(
                "network expects {} input channels, got {}",
                self.in_channels(),
                x.channels
            )));
        }
        Ok(())
    }

    fn finish(&self, last: bool, y: &mut Batch<T>) {
        if last {
            if self.head == Head::Tanh {
                y.data.iter_mut().for_each(|v| *v = v.tanh());
            }
        } else {
            y.data.iter_mut().for_each(|v| *v = leaky_relu(*v));
        }
    }

    /// Inference pass without keeping intermediates.
    pub fn forward(&self, x: &Batch<T>, mode: NormMode) -> Result<Batch<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter().enumerate() {
            let mut y = conv_forward(&cur, &b.weight, &b.bias, b.cout);
            if let Some(norm) = &b.norm {
                match mode {
                    NormMode::Instance => {
                        instance_norm_forward(&mut y, &norm.gamma, &norm.beta);
                    }
                    NormMode::Running => fixed_norm_forward(
                        &mut y,
                        &norm.gamma,
                        &norm.beta,
                        &norm.running_mean,
                        &norm.running_var,
                    ),
                }
            }
            self.finish(i + 1 == n, &mut y);
            cur = y;
        }
        Ok(cur)
    }

    /// Training pass (instance statistics) that records what backward needs.
    pub fn forward_traced(&self, x: Batch<T>) -> Result<(Batch<T>, Trace<T>)> {
        self.check_input(&x)?;
        let n = self.blocks.len();
        let mut traces = Vec::with_capacity(n);
        let mut cur = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let mut y = conv_forward(&cur, &b.weight, &b.bias, b.cout);
            let norm = b
                .norm
                .as_ref()
                .map(|p| instance_norm_forward(&mut y, &p.gamma, &p.beta));
            self.finish(i + 1 == n, &mut y);
            traces.push(BlockTrace {
                input: cur,
                norm,
                output: y.data.clone(),
            });
            cur = y;
        }
        Ok((cur, Trace { blocks: traces }))
    }

    /// Backpropagates `grad_out` through a recorded pass. Parameter gradients
    /// accumulate into `grads` when given; the input gradient is returned when
    /// `want_input` is set.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: Vec<T>,
        mut grads: Option<&mut NetGrads<T>>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let n = self.blocks.len();
        let mut slot = self.trainable().len();
        let mut d = grad_out;
        for i in (0..n).rev() {
            let b = &self.blocks[i];
            let t = &trace.blocks[i];
            let last = i + 1 == n;
            if last {
                if self.head == Head::Tanh {
                    for (g, &y) in d.iter_mut().zip(&t.output) {
                        *g *= T::one() - y * y;
                    }
                }
            } else {
                let leak = T::lit(LEAK);
                for (g, &y) in d.iter_mut().zip(&t.output) {
                    if y <= T::zero() {
                        *g *= leak;
                    }
                }
            }
            let tensors = if b.norm.is_some() { 4 } else { 2 };
            slot -= tensors;
            if let (Some(p), Some(nt)) = (&b.norm, &t.norm) {
                let affine = grads.as_deref_mut().map(|g| {
                    let (head, tail) = g.tensors.split_at_mut(slot + 3);
                    (head[slot + 2].as_mut_slice(), tail[0].as_mut_slice())
                });
                instance_norm_backward(&mut d, nt, t.input.area(), t.input.batch, &p.gamma, affine);
            }
            let need_input = want_input || i > 0;
            let gw = grads.as_deref_mut().map(|g| {
                let (head, tail) = g.tensors.split_at_mut(slot + 1);
                (head[slot].as_mut_slice(), tail[0].as_mut_slice())
            });
            match conv_backward(&t.input, &b.weight, b.cout, &d, gw, need_input) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    /// Blends per-instance statistics of a training pass into the running
    /// averages.
    pub fn absorb_statistics(&mut self, stats: &NormStats<T>) {
        let m = T::lit(RUNNING_MOMENTUM);
        for (b, s) in self.blocks.iter_mut().zip(&stats.blocks) {
            let (Some(p), Some((mean, var))) = (b.norm.as_mut(), s.as_ref()) else {
                continue;
            };
            let unbias = if stats.area > 1 {
                T::lit(stats.area as f64 / (stats.area - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..b.cout {
                p.running_mean[c] = (T::one() - m) * p.running_mean[c] + m * mean[c];
                p.running_var[c] = (T::one() - m) * p.running_var[c] + m * var[c] * unbias;
            }
        }
    }
}

/// Batch-averaged normalization statistics of one traced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    /// Per block: per-channel mean and (biased) variance, `None` when the
    /// block has no normalization.
    pub blocks: Vec<Option<(Vec<T>, Vec<T>)>>,
    pub area: usize,
}

impl<T: Real> Trace<T> {
    pub fn norm_stats(&self) -> NormStats<T> {
        let area = self.blocks.first().map_or(0, |b| b.input.area());
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let nt = b.norm.as_ref()?;
                let batch = b.input.batch;
                let inv_b = T::one() / T::lit(batch as f64);
                let avg = |v: &[T]| -> Vec<T> {
                    v.chunks(batch).map(|c| c.iter().copied().sum::<T>() * inv_b).collect()
                };
                Some((avg(&nt.mean), avg(&nt.var)))
            })
            .collect();
        NormStats { blocks, area }
    }
}

/// Stacks image-shaped arrays of equal shape into one batch.
pub fn batch_of<T: Real>(items: &[&Planes]) -> Result<Batch<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::validation("empty batch"))?;
    let mut batch = Batch::zeros(first.channels, items.len(), first.height, first.width);
    for (b, p) in items.iter().enumerate() {
        if !p.same_shape(first) {
            return Err(Error::validation("batch items differ in shape"));
        }
        let conv: Vec<T> = p.data.iter().map(|&v| T::lit(v as f64)).collect();
        batch.set_item(b, &conv);
    }
    Ok(batch)
}

/// Encoded value of sample index `i` among `k` in the condition channel.
pub fn condition_value(i: usize, k: usize) -> f32 {
    i as f32 / (k.max(2) - 1) as f32
}

/// Appends one channel filled with the encoded sample index.
pub fn attach_condition(x: &Planes, i: usize, k: usize) -> Result<Planes> {
    if i >= k {
        return Err(Error::validation(format!("sample index {i} out of range for k={k}")));
    }
    let mut data = x.data.clone();
    data.extend(std::iter::repeat_n(condition_value(i, k), x.area()));
    Planes::new(x.channels + 1, x.height, x.width, data)
}

/// Discriminator logits for one image: `classes x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f32>,
}

impl ResponseMap {
    pub fn class_plane(&self, class: usize) -> &[f32] {
        let a = self.height * self.width;
        &self.logits[class * a..(class + 1) * a]
    }

    /// Softmax probabilities over the class axis at every position.
    pub fn softmax(&self) -> Vec<f64> {
        let a = self.height * self.width;
        let mut out = vec![0.0; self.logits.len()];
        for p in 0..a {
            let max = (0..self.classes)
                .map(|c| self.logits[c * a + p] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..self.classes)
                .map(|c| (self.logits[c * a + p] as f64 - max).exp())
                .sum();
            for c in 0..self.classes {
                out[c * a + p] = (self.logits[c * a + p] as f64 - max).exp() / z;
            }
        }
        out
    }
}

/// Residual produced by a generator for one input (the caller adds the
/// upsampled coarser image).
pub fn generator_forward(g: &Network<f32>, input: &Planes) -> Result<Planes> {
    let out = g.forward(&batch_of::<f32>(&[input])?, NormMode::Instance)?;
    Planes::new(out.channels, out.height, out.width, out.data)
}

pub fn discriminator_forward(
    d: &Network<f32>,
    img: &Planes,
    mode: NormMode,
) -> Result<ResponseMap> {
    let out = d.forward(&batch_of::<f32>(&[img])?, mode)?;
    Ok(ResponseMap {
        classes: out.channels,
        height: out.height,
        width: out.width,
        logits: out.data,
    })
}
