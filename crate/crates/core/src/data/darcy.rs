//! `−∇·(a∇u) = 1` on the unit square, zero Dirichlet boundary, 5-point stencil.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::random_field::gaussian_random_field;
use super::{Field, OperatorDataset, Sample};
use crate::error::{MofsError, Result};

pub const CG_TOL: f64 = 1e-10;
pub const RESIDUAL_TOL: f64 = 1e-8;
const GRF_ALPHA: f64 = 2.0;
const GRF_TAU: f64 = 3.0;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut s = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                s += self.values[k] * x[self.indices[k]];
            }
            y[r] = s;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.indptr[r]..self.indptr[r + 1])
            .find(|&k| self.indices[k] == c)
            .map_or(0.0, |k| self.values[k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles the finite-difference operator for coefficient `a`.
///
/// Unknowns sit on the `H×W` interior nodes of a grid with spacing
/// `1/(H+1)` × `1/(W+1)`. Face coefficients use the harmonic mean; faces on
/// the boundary take the adjacent cell value.
pub fn assemble(a: &Field) -> CsrMatrix {
    let (h, w) = a.dims();
    let (hy, hx) = (1.0 / (h + 1) as f64, 1.0 / (w + 1) as f64);
    let (sy, sx) = (1.0 / (hy * hy), 1.0 / (hx * hx));
    let n = h * w;
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(5 * n);
    let mut values = Vec::with_capacity(5 * n);
    indptr.push(0);
    for i in 0..h {
        for j in 0..w {
            let c = a.at(i, j);
            let r = i * w + j;
            let mut diag = 0.0;
            let mut off: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut face = |nb: Option<(usize, usize)>, s: f64| match nb {
                Some((ni, nj)) => {
                    let k = harmonic(c, a.at(ni, nj)) * s;
                    diag += k;
                    off.push((ni * w + nj, -k));
                }
                None => diag += c * s,
            };
            face(i.checked_sub(1).map(|ni| (ni, j)), sy);
            face((i + 1 < h).then_some((i + 1, j)), sy);
            face(j.checked_sub(1).map(|nj| (i, nj)), sx);
            face((j + 1 < w).then_some((i, j + 1)), sx);
            off.push((r, diag));
            off.sort_by_key(|e| e.0);
            for (col, v) in off {
                indices.push(col);
                values.push(v);
            }
            indptr.push(indices.len());
        }
    }
    CsrMatrix { n, indptr, indices, values }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient; stops at `‖r‖ ≤ tol·‖b‖`.
pub fn conjugate_gradient(m: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> std::result::Result<Vec<f64>, String> {
    let n = m.n;
    let dinv: Vec<f64> = m.diagonal().iter().map(|&d| 1.0 / d).collect();
    if dinv.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err("non-positive diagonal".into());
    }
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        m.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err("matrix is not positive definite".into());
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok(x);
        }
        for k in 0..n {
            z[k] = r[k] * dinv[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(format!("conjugate gradient did not converge in {max_iter} iterations"))
}

pub fn residual_inf(m: &CsrMatrix, u: &[f64], f: &[f64]) -> f64 {
    let mut au = vec![0.0; m.n];
    m.matvec(u, &mut au);
    au.iter().zip(f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Solves for `u` given coefficient `a` with unit forcing.
pub fn solve(a: &Field, sample: usize) -> Result<Field> {
    let m = assemble(a);
    let f = vec![1.0; m.n];
    let u = conjugate_gradient(&m, &f, CG_TOL, 20 * m.n + 100).map_err(|reason| MofsError::Solve { sample, reason })?;
    let res = residual_inf(&m, &u, &f);
    if !(res < RESIDUAL_TOL) {
        return Err(MofsError::Solve { sample, reason: format!("residual {res:e} exceeds {RESIDUAL_TOL:e}") });
    }
    let (h, w) = a.dims();
    Field::new(h, w, u)
}

/// Two-valued `{1, β}` permeability from a median-thresholded smooth field.
pub fn permeability(h: usize, w: usize, beta: f64, seed: u64, sample: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    let g = gaussian_random_field(h, w, GRF_ALPHA, GRF_TAU, &mut rng);
    let mut sorted = g.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 0 { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) } else { sorted[n / 2] };
    Field::new(h, w, g.iter().map(|&v| if v > median { beta } else { 1.0 }).collect())
}

pub fn darcy_name(beta: f64) -> String {
    format!("DarcyFlow-{beta:?}")
}

pub fn generate_darcy(beta: f64, n_samples: usize, h: usize, w: usize, seed: u64) -> Result<OperatorDataset> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(MofsError::Config(format!("beta must be positive, got {beta}")));
    }
    if n_samples == 0 {
        return Err(MofsError::Config("n_samples must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let a = permeability(h, w, beta, seed, s as u64)?;
        let u = solve(&a, s)?;
        samples.push(Sample { a, u });
    }
    let mut params = BTreeMap::new();
    params.insert("beta".to_string(), beta);
    params.insert("seed".to_string(), seed as f64);
    OperatorDataset::build(darcy_name(beta), 0, samples, params)
}
