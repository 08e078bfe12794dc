//! Adam with global gradient-norm clipping and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_CLIP: f64 = 1.0;

/// `lr · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: DEFAULT_CLIP, step: 0, moments: BTreeMap::new() }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        let live: Vec<(ParamId, &Tensor)> = grads.params().filter(|(id, _)| store.is_trainable(*id)).collect();
        let norm = live.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in live {
            let p = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            for k in 0..g.len() {
                let gk = g.data()[k] * scale;
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let upd = lr * (m.data()[k] / bc1) / ((v.data()[k] / bc2).sqrt() + self.eps);
                p.data_mut()[k] -= upd;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![3.0, -2.0]));
        let y = store.add("y", Tensor::row(vec![1.0]));
        store.set_trainable(y, false);
        let mut opt = Adam::default();
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let xv = g.param(x);
                let yv = g.param(y);
                let s = g.square(xv);
                let a = g.sum_all(s);
                let b = g.sum_all(yv);
                let l = g.add(a, b);
                g.backward(l)
            };
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(x).max_abs() < 1e-2);
        assert_eq!(store.get(y).data(), &[1.0]);
    }
}
