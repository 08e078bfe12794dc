//! Smooth Gaussian random fields via spectral filtering of white noise.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::spectral::{dft2_raw, idft2, Spectrum};

/// Signed integer wavenumber of FFT index `i` on an `n`-point grid.
pub fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// White noise filtered by `(|k|² + tau²)^(−alpha/2)`, rescaled to unit
/// standard deviation. The mean is left as sampled.
pub fn gaussian_random_field<R: Rng + ?Sized>(h: usize, w: usize, alpha: f64, tau: f64, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut spec = dft2_raw(&noise, h, w);
    for i in 0..h {
        let ky = wavenumber(i, h);
        for j in 0..w {
            let kx = wavenumber(j, w);
            let filt = (kx * kx + ky * ky + tau * tau).powf(-alpha / 2.0);
            spec.data[i * w + j] *= filt;
        }
    }
    let mut out: Vec<f64> = idft2(&spec).into_iter().map(|c| c.re).collect();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let std = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64).sqrt();
    if std > 0.0 {
        out.iter_mut().for_each(|v| *v /= std);
    }
    out
}

/// Keep only modes inside the 2/3 band in both directions.
pub fn dealias_mask(h: usize, w: usize) -> Vec<bool> {
    let (cy, cx) = (h as f64 / 3.0, w as f64 / 3.0);
    let mut m = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            m.push(wavenumber(i, h).abs() < cy && wavenumber(j, w).abs() < cx);
        }
    }
    m
}

pub fn apply_mask(spec: &mut Spectrum, mask: &[bool]) {
    for (c, &keep) in spec.data.iter_mut().zip(mask) {
        if !keep {
            *c = Complex64::new(0.0, 0.0);
        }
    }
}
