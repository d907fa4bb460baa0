use crate::nets::{NetGrads, Network};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(net: &Network<f32>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f32>> = net.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, net: &mut Network<f32>, grads: &NetGrads<f32>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let eps_hat = eps * c2.sqrt() as f32;
        for (((param, grad), m), v) in net
            .trainable_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                param[i] -= step * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Head;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut net = Network::<f32>::zeros(1, 2, 1, 2, Head::Logits);
        let mut grads = net.zero_grads();
        for t in &mut grads.tensors {
            t.iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 3.0 } else { -0.5 });
        }
        let mut adam = Adam::new(&net, 0.01, 0.5, 0.999);
        adam.apply(&mut net, &grads);
        let w = &net.blocks[0].weight;
        assert!((w[0] + 0.01).abs() < 1e-6);
        assert!((w[1] - 0.01).abs() < 1e-6);
    }
}
