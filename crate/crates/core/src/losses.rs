//! Training objectives expressed on the autodiff graph.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Field;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1, lambda3: 0.1, lambda4: 0.01 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0 }
    }
}

fn ratio(g: &mut Graph<'_>, num: Var, den: Var, eps: f64) -> Var {
    let den = g.shift(den, eps);
    let inv = g.recip(den);
    g.mul(num, inv)
}

/// `‖u − û‖ / (‖u‖ + ε)`.
pub fn relative_l2(g: &mut Graph<'_>, pred: Var, target: Var) -> Var {
    let diff = g.sub(target, pred);
    let num = g.frobenius(diff);
    let den = g.frobenius(target);
    ratio(g, num, den, EPS)
}

/// Value-only `‖u − û‖ / (‖u‖ + ε)` on fields.
pub fn relative_l2_error(pred: &Field, truth: &Field) -> f64 {
    let num: f64 = pred.values().iter().zip(truth.values()).map(|(p, t)| (t - p) * (t - p)).sum();
    num.sqrt() / (truth.norm() + EPS)
}

/// Squared relative error restricted to pixels where `mask == 0`.
pub fn masked_term(g: &mut Graph<'_>, pred: Var, target: Var, mask: &Tensor, eps: f64) -> Var {
    let hidden = g.constant(mask.map(|m| 1.0 - m));
    let diff = g.sub(pred, target);
    let d = g.mul(hidden, diff);
    let d2 = g.square(d);
    let num = g.sum_all(d2);
    let t = g.mul(hidden, target);
    let t2 = g.square(t);
    let den = g.sum_all(t2);
    ratio(g, num, den, eps)
}

#[allow(clippy::too_many_arguments)]
pub fn spatial_loss(
    g: &mut Graph<'_>,
    a_hat: Var,
    u_hat: Var,
    a: Var,
    u: Var,
    mask_a: &Tensor,
    mask_u: &Tensor,
    eps: f64,
) -> Var {
    let ta = masked_term(g, a_hat, a, mask_a, eps);
    let tu = masked_term(g, u_hat, u, mask_u, eps);
    g.add(ta, tu)
}

/// `‖F̂ − |F(a)|‖ / (‖|F(a)|‖ + ε)` with the magnitude supplied as `target`.
pub fn freq_loss(g: &mut Graph<'_>, f_hat: Var, target: Var) -> Var {
    relative_l2(g, f_hat, target)
}

/// Difficulty `λ_t` and hard-negative threshold `θ_t` at epoch `t` of `T`.
pub fn curriculum_params(t: f64, total: f64) -> (f64, f64) {
    let ramp = 0.3 * total;
    let lambda = if t >= ramp { 1.0 } else { (t / ramp).min(1.0) };
    (lambda, 0.4 + 0.3 * (1.0 - lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub lambda_t: f64,
    pub theta_t: f64,
    pub tau_c: f64,
}

impl Curriculum {
    pub fn at(t: f64, total: f64, tau_c: f64) -> Self {
        let (lambda_t, theta_t) = curriculum_params(t, total);
        Self { lambda_t, theta_t, tau_c }
    }
}

/// Supervised contrastive loss between two views with hard-negative
/// up-weighting. Anchors without a positive are left out of the average;
/// a batch with none returns zero.
pub fn supcon_loss(g: &mut Graph<'_>, za: Var, zu: Var, labels: &[usize], c: Curriculum) -> Var {
    let b = labels.len();
    assert_eq!(g.shape(za).0, b, "supcon batch size");
    assert_eq!(g.shape(zu).0, b, "supcon batch size");
    let na = g.normalize_rows(za);
    let nu = g.normalize_rows(zu);
    let cos = g.matmul_t(na, nu);
    let s = g.scale(cos, 1.0 / c.tau_c);
    let sv = g.value(s).clone();
    let mut pos = Tensor::zeros(b, b);
    let mut den = Tensor::zeros(b, b);
    let mut valid = Tensor::zeros(b, 1);
    let mut n_valid = 0usize;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let mut w = 1.0;
            if labels[i] == labels[j] {
                pos.set(i, j, 1.0);
            } else if sv.get(i, j) > c.theta_t {
                w += c.lambda_t;
            }
            den.set(i, j, w);
        }
        if (0..b).any(|j| pos.get(i, j) > 0.0) {
            valid.set(i, 0, 1.0);
            n_valid += 1;
        } else {
            (0..b).for_each(|j| den.set(i, j, 0.0));
        }
    }
    if n_valid == 0 {
        warn!("contrastive batch has no positive pairs; loss set to zero");
        return g.constant(Tensor::scalar(0.0));
    }
    // subtract the row maximum for stability; it cancels in the ratio
    let shift = Tensor::from_fn(b, b, |i, _| {
        (0..b).filter(|&j| j != i).map(|j| sv.get(i, j)).fold(f64::NEG_INFINITY, f64::max)
    });
    let shift = g.constant(shift);
    let s = g.sub(s, shift);
    let e = g.exp(s);
    let pos = g.constant(pos);
    let den = g.constant(den);
    let ep = g.mul(e, pos);
    let num = g.sum_cols(ep);
    let ed = g.mul(e, den);
    let dsum = g.sum_cols(ed);
    // invalid anchors get num = den = 1 so their log term is zero
    let pad = g.constant(valid.map(|v| 1.0 - v));
    let num = g.add(num, pad);
    let dsum = g.add(dsum, pad);
    let ln = g.log(num);
    let ld = g.log(dsum);
    let diff = g.sub(ld, ln);
    let total = g.sum_all(diff);
    g.scale(total, 1.0 / n_valid as f64)
}

/// Views for the three consistency terms, each `B×d`.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyViews {
    pub z_a: Var,
    pub z_u: Var,
    pub e_text: Var,
    pub z_hat_u: Var,
}

/// The three weighted terms; a zero weight yields `None`.
pub fn consistency_parts(
    g: &mut Graph<'_>,
    v: ConsistencyViews,
    labels: &[usize],
    w: &LossWeights,
    c: Curriculum,
) -> [Option<Var>; 3] {
    [(w.lambda1, v.z_a, v.z_u), (w.lambda2, v.z_u, v.e_text), (w.lambda3, v.z_a, v.z_hat_u)].map(|(lambda, x, y)| {
        (lambda != 0.0).then(|| {
            let l = supcon_loss(g, x, y, labels, c);
            g.scale(l, lambda)
        })
    })
}

pub fn consistency_loss(g: &mut Graph<'_>, v: ConsistencyViews, labels: &[usize], w: &LossWeights, c: Curriculum) -> Var {
    let terms: Vec<Var> = consistency_parts(g, v, labels, w, c).into_iter().flatten().collect();
    sum_vars(g, &terms)
}

/// `λ4 · 2/(N(N−1)) · Σ_{i<j} (k_iᵀ k_j)²` on raw keys.
pub fn diversity_loss(g: &mut Graph<'_>, keys: Var, lambda4: f64) -> Var {
    let n = g.shape(keys).0;
    if n < 2 || lambda4 == 0.0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let gram = g.matmul_t(keys, keys);
    let sq = g.square(gram);
    let off = g.constant(Tensor::from_fn(n, n, |i, j| (i != j) as u8 as f64));
    let m = g.mul(sq, off);
    let s = g.sum_all(m);
    g.scale(s, lambda4 / (n * (n - 1)) as f64)
}

pub fn stage2_loss(g: &mut Graph<'_>, pred: Var, consis: Var, diversity: Var) -> Var {
    sum_vars(g, &[pred, consis, diversity])
}

fn sum_vars(g: &mut Graph<'_>, vars: &[Var]) -> Var {
    match vars.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &v| g.add(acc, v)),
    }
}
