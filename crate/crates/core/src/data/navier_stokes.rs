//! Periodic 2D incompressible flow in vorticity form on `[0, 2π)²`.
//!
//! `∂ω/∂t + u·∇ω = ν Δω`, with `u = (∂ψ/∂y, −∂ψ/∂x)` and `−Δψ = ω`.
//! Columns run along `x`, rows along `y`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::random_field::{apply_mask, dealias_mask, gaussian_random_field, wavenumber};
use super::{Field, OperatorDataset, Sample};
use crate::error::{MofsError, Result};
use crate::spectral::{dft2_complex, dft2_raw, idft2, Spectrum};

pub const DEFAULT_VISCOSITY: f64 = 1e-3;
pub const DEFAULT_T_FINAL: f64 = 5.0;
pub const DEFAULT_STEPS: usize = 100;
pub const CFL_LIMIT: f64 = 0.5;
const GRF_ALPHA: f64 = 2.5;
const GRF_TAU: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsParams {
    pub t_final: f64,
    pub viscosity: f64,
    pub n_steps: usize,
}

impl Default for NsParams {
    fn default() -> Self {
        Self { t_final: DEFAULT_T_FINAL, viscosity: DEFAULT_VISCOSITY, n_steps: DEFAULT_STEPS }
    }
}

impl NsParams {
    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    fn validate(&self) -> Result<()> {
        if !(self.viscosity > 0.0) || !(self.t_final > 0.0) || self.n_steps == 0 {
            return Err(MofsError::Config(format!(
                "navier-stokes needs viscosity > 0, T_final > 0 and at least one step, got {self:?}"
            )));
        }
        Ok(())
    }
}

struct Solver {
    h: usize,
    w: usize,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    mask: Vec<bool>,
    nu: f64,
}

impl Solver {
    fn new(h: usize, w: usize, nu: f64) -> Self {
        let mut kx = Vec::with_capacity(h * w);
        let mut ky = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                kx.push(wavenumber(j, w));
                ky.push(wavenumber(i, h));
            }
        }
        let k2 = kx.iter().zip(&ky).map(|(a, b)| a * a + b * b).collect();
        Self { h, w, kx, ky, k2, mask: dealias_mask(h, w), nu }
    }

    fn spec(&self, data: Vec<Complex64>) -> Spectrum {
        Spectrum { h: self.h, w: self.w, data }
    }

    fn real(&self, data: Vec<Complex64>) -> Vec<f64> {
        idft2(&self.spec(data)).into_iter().map(|c| c.re).collect()
    }

    /// Velocity components in physical space.
    fn velocity(&self, omega: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let psi: Vec<Complex64> = omega
            .iter()
            .zip(&self.k2)
            .map(|(w, &k2)| if k2 == 0.0 { Complex64::new(0.0, 0.0) } else { w / k2 })
            .collect();
        let u = psi.iter().zip(&self.ky).map(|(p, &k)| i * k * p).collect();
        let v = psi.iter().zip(&self.kx).map(|(p, &k)| -i * k * p).collect();
        (self.real(u), self.real(v))
    }

    fn rhs(&self, omega: &[Complex64]) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let (u, v) = self.velocity(omega);
        let wx = self.real(omega.iter().zip(&self.kx).map(|(w, &k)| i * k * w).collect());
        let wy = self.real(omega.iter().zip(&self.ky).map(|(w, &k)| i * k * w).collect());
        let adv: Vec<f64> = (0..u.len()).map(|p| u[p] * wx[p] + v[p] * wy[p]).collect();
        let mut n = dft2_raw(&adv, self.h, self.w);
        apply_mask(&mut n, &self.mask);
        n.data
            .iter()
            .zip(omega)
            .zip(&self.k2)
            .map(|((nh, w), &k2)| -nh - self.nu * k2 * w)
            .collect()
    }

    fn courant(&self, omega: &[Complex64], dt: f64) -> f64 {
        let (u, v) = self.velocity(omega);
        let dx = 2.0 * std::f64::consts::PI / self.w as f64;
        let dy = 2.0 * std::f64::consts::PI / self.h as f64;
        let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        dt * (umax / dx + vmax / dy)
    }

    fn energy(&self, omega: &[Complex64]) -> f64 {
        omega
            .iter()
            .zip(&self.k2)
            .filter(|(_, &k2)| k2 > 0.0)
            .map(|(w, &k2)| w.norm_sqr() / k2)
            .sum::<f64>()
    }
}

/// Kinetic energy trajectory, one entry per step plus the initial state.
pub fn energy_history(omega0: &Field, params: NsParams) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    simulate_inner(omega0, params, |s, w| out.push(s.energy(w)))?;
    Ok(out)
}

/// Advances vorticity `omega0` to `params.t_final`.
pub fn simulate(omega0: &Field, params: NsParams) -> Result<Field> {
    simulate_inner(omega0, params, |_, _| {})
}

fn simulate_inner(omega0: &Field, params: NsParams, mut observe: impl FnMut(&Solver, &[Complex64])) -> Result<Field> {
    params.validate()?;
    let (h, w) = omega0.dims();
    let solver = Solver::new(h, w, params.viscosity);
    let dt = params.dt();
    let mut omega = dft2(omega0).data;
    observe(&solver, &omega);
    for step in 0..params.n_steps {
        let courant = solver.courant(&omega, dt);
        if courant > CFL_LIMIT {
            return Err(MofsError::Cfl { step, courant, limit: CFL_LIMIT });
        }
        let k1 = solver.rhs(&omega);
        let mid: Vec<Complex64> = omega.iter().zip(&k1).map(|(w, k)| w + dt * k).collect();
        let k2 = solver.rhs(&mid);
        for p in 0..omega.len() {
            omega[p] += 0.5 * dt * (k1[p] + k2[p]);
        }
        observe(&solver, &omega);
    }
    let out = solver.real(omega);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(MofsError::NonFinite("navier-stokes state".into()));
    }
    Field::new(h, w, out)
}

fn dft2(f: &Field) -> Spectrum {
    dft2_complex(f.values().iter().map(|&v| Complex64::new(v, 0.0)).collect(), f.height(), f.width())
}

/// Band-limited initial vorticity for sample `sample` of family `ic_seed`.
pub fn initial_vorticity(h: usize, w: usize, ic_seed: u64, sample: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(ic_seed);
    rng.set_stream(sample);
    let g = gaussian_random_field(h, w, GRF_ALPHA, GRF_TAU, &mut rng);
    let mut s = dft2_raw(&g, h, w);
    apply_mask(&mut s, &dealias_mask(h, w));
    Field::new(h, w, idft2(&s).into_iter().map(|c| c.re).collect())
}

pub fn ns_name(ic_seed: u64) -> String {
    format!("NavierStokes-{ic_seed}")
}

pub fn generate_navier_stokes(ic_seed: u64, n_samples: usize, h: usize, w: usize, params: NsParams) -> Result<OperatorDataset> {
    params.validate()?;
    if n_samples == 0 {
        return Err(MofsError::Config("n_samples must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let a = initial_vorticity(h, w, ic_seed, s as u64)?;
        let u = simulate(&a, params)?;
        samples.push(Sample { a, u });
    }
    let mut gp = BTreeMap::new();
    gp.insert("ic_seed".to_string(), ic_seed as f64);
    gp.insert("t_final".to_string(), params.t_final);
    gp.insert("viscosity".to_string(), params.viscosity);
    gp.insert("n_steps".to_string(), params.n_steps as f64);
    OperatorDataset::build(ns_name(ic_seed), 0, samples, gp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short() -> NsParams {
        NsParams { t_final: 0.5, viscosity: 1e-3, n_steps: 10 }
    }

    #[test]
    fn zero_vorticity_stays_zero() {
        let u = simulate(&Field::zeros(16, 16), short()).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_vorticity_is_conserved() {
        let a = initial_vorticity(16, 16, 3, 0).unwrap().map(|v| v + 0.25);
        let u = simulate(&a, short()).unwrap();
        assert!((u.mean() - a.mean()).abs() < 1e-6);
    }

    #[test]
    fn energy_does_not_grow() {
        let a = initial_vorticity(16, 16, 101, 2).unwrap();
        let e = energy_history(&a, NsParams { t_final: 2.0, viscosity: 1e-3, n_steps: 40 }).unwrap();
        for pair in e.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn velocity_is_divergence_free() {
        let a = initial_vorticity(16, 16, 0, 0).unwrap();
        let s = Solver::new(16, 16, 1e-3);
        let om = dft2(&a).data;
        let (u, v) = s.velocity(&om);
        let uh = dft2_raw(&u, 16, 16).data;
        let vh = dft2_raw(&v, 16, 16).data;
        let i = Complex64::new(0.0, 1.0);
        for p in 0..256 {
            assert!((i * s.kx[p] * uh[p] + i * s.ky[p] * vh[p]).norm() < 1e-9);
        }
    }

    #[test]
    fn oversized_step_is_rejected() {
        let a = initial_vorticity(16, 16, 0, 0).unwrap().map(|v| v * 50.0);
        let err = simulate(&a, NsParams { t_final: 10.0, viscosity: 1e-3, n_steps: 2 }).unwrap_err();
        assert!(matches!(err, MofsError::Cfl { .. }));
    }

    #[test]
    fn rejects_nonpositive_viscosity() {
        let a = Field::zeros(8, 8);
        assert!(simulate(&a, NsParams { viscosity: 0.0, ..short() }).is_err());
    }
}
