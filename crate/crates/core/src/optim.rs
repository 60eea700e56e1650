//! Gradient-descent optimizers keyed by parameter identity.

use std::collections::HashMap;

use crate::autograd::Gradients;
use crate::nn::{HasParams, Param};
use crate::tensor::Scalar;

/// Stochastic gradient descent with momentum and L2 weight decay.
///
/// Update rule: `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, modules: &mut [&mut dyn HasParams<T>], grads: &Gradients<T>) {
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        for m in modules.iter_mut() {
            m.visit_params(&mut |p: &mut Param<T>| {
                let Some(g) = grads.param(p.id()) else { return };
                let v = self
                    .velocity
                    .entry(p.id())
                    .or_insert_with(|| vec![T::zero(); g.numel()]);
                for ((w, &gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    let d = gv + wd * *w;
                    *vv = mu * *vv + d;
                    *w -= lr * *vv;
                }
            });
        }
    }
}

/// Adam with bias correction.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: HashMap<u64, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, modules: &mut [&mut dyn HasParams<T>], grads: &Gradients<T>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for m in modules.iter_mut() {
            m.visit_params(&mut |p: &mut Param<T>| {
                let Some(g) = grads.param(p.id()) else { return };
                let (mv, vv) = self
                    .moments
                    .entry(p.id())
                    .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
                for (i, (w, &gv)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                    mv[i] = b1 * mv[i] + (T::one() - b1) * gv;
                    vv[i] = b2 * vv[i] + (T::one() - b2) * gv * gv;
                    let mhat = mv[i] / c1;
                    let vhat = vv[i] / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }
}

/// Step schedule: `base * gamma^(number of milestones passed)`.
pub fn multistep_lr(base: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base * gamma.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::{Ctx, Linear, Mode};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_matches_hand_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(1, 1, false, &mut rng);
        lin.weight.value = Tensor::full(&[1, 1], 2.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for expected in [2.0 - 0.1 * 2.0, 1.8 - 0.1 * (0.9 * 2.0 + 1.8)] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[1, 1], 1.0));
            let mut ctx = Ctx::new(&mut g, Mode::TRAIN);
            let y = lin.forward(&mut ctx, x).unwrap();
            // loss = y^2 / 2, dL/dw = w
            let sq = g.square(y);
            let loss = g.scale(sq, 0.5);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut [&mut lin], &grads);
            assert!((lin.weight.value.item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn multistep_schedule() {
        assert_eq!(multistep_lr(0.1, &[80, 120], 0.1, 0), 0.1);
        assert!((multistep_lr(0.1, &[80, 120], 0.1, 80) - 0.01).abs() < 1e-15);
        assert!((multistep_lr(0.1, &[80, 120], 0.1, 159) - 0.001).abs() < 1e-15);
    }
}
