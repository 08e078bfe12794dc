//! Central finite-difference verification of reverse-mode gradients.
//!
//! The finite-difference side only ever evaluates forward values, so it is an
//! independent check of every backward rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on perturbed coordinates per tensor (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: 64 }
    }
}

/// Reduce a possibly non-scalar output to a scalar with fixed random weights,
/// so that outputs with structurally zero sums (e.g. layer-normalised rows)
/// still produce informative gradients.
fn reduce(g: &mut Graph<'_>, out: Var) -> Var {
    let (r, c) = g.shape(out);
    if (r, c) == (1, 1) {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Tensor::randn(r, c, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w);
    g.sum_all(p)
}

fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Norm-wise relative error between two gradient samples.
fn rel_err(fd: &[f64], ad: &[f64]) -> f64 {
    let diff: f64 = fd.iter().zip(ad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let nf: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    let na: f64 = ad.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = nf.max(na);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        Self { step, ..Self::default() }
    }

    /// Check gradients with respect to the input tensors. Returns the worst
    /// norm-wise relative error over all inputs.
    pub fn inputs<F>(&self, store: Option<&ParamStore>, inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Var,
    {
        let eval = |ts: &[Tensor], grad: bool| -> (f64, Vec<Option<Tensor>>) {
            let mut g = match store {
                Some(s) => Graph::with_params(s),
                None => Graph::new(),
            };
            let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            let loss = reduce(&mut g, out);
            let value = g.scalar(loss);
            if !grad {
                return (value, Vec::new());
            }
            let grads = g.backward(loss);
            (value, vars.iter().map(|&v| grads.wrt(v).cloned()).collect())
        };
        let (_, analytic) = eval(inputs, true);
        let mut worst = 0.0f64;
        let mut work = inputs.to_vec();
        for (k, input) in inputs.iter().enumerate() {
            let idx = coords(input.len(), self.max_coords);
            let ad: Vec<f64> = idx
                .iter()
                .map(|&i| analytic[k].as_ref().map_or(0.0, |t| t.data()[i]))
                .collect();
            let mut fd = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = work[k].data()[i];
                work[k].data_mut()[i] = orig + self.step;
                let (plus, _) = eval(&work, false);
                work[k].data_mut()[i] = orig - self.step;
                let (minus, _) = eval(&work, false);
                work[k].data_mut()[i] = orig;
                fd.push((plus - minus) / (2.0 * self.step));
            }
            worst = worst.max(rel_err(&fd, &ad));
        }
        worst
    }

    /// Check gradients with respect to stored parameters. Returns the worst
    /// norm-wise relative error and the name of the offending parameter.
    pub fn params<F>(&self, store: &mut ParamStore, ids: &[ParamId], f: F) -> (f64, String)
    where
        F: Fn(&mut Graph<'_>) -> Var,
    {
        let eval = |s: &ParamStore, grad: bool| -> (f64, Vec<Option<Tensor>>) {
            let mut g = Graph::with_params(s);
            let out = f(&mut g);
            let loss = reduce(&mut g, out);
            let value = g.scalar(loss);
            if !grad {
                return (value, Vec::new());
            }
            let grads = g.backward(loss);
            (value, ids.iter().map(|&id| grads.param(id).cloned()).collect())
        };
        let (_, analytic) = eval(store, true);
        let mut worst = (0.0f64, String::new());
        for (k, &id) in ids.iter().enumerate() {
            let idx = coords(store.get(id).len(), self.max_coords);
            let ad: Vec<f64> = idx
                .iter()
                .map(|&i| analytic[k].as_ref().map_or(0.0, |t| t.data()[i]))
                .collect();
            let mut fd = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + self.step;
                let (plus, _) = eval(store, false);
                store.get_mut(id).data_mut()[i] = orig - self.step;
                let (minus, _) = eval(store, false);
                store.get_mut(id).data_mut()[i] = orig;
                fd.push((plus - minus) / (2.0 * self.step));
            }
            let e = rel_err(&fd, &ad);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), store.name(id).to_string());
            }
        }
        worst
    }
}
