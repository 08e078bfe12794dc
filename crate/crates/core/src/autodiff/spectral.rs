//! Kernels for the truncated spectral convolution op.
//!
//! Retained modes are indexed by signed row frequency `kx ∈ [-m1, m1)` (stored
//! as `0..m1` followed by `H-m1..H`) and non-negative column frequency
//! `ky ∈ [0, m2)`. The inverse uses the Hermitian-completed real transform, so
//! the output is real by construction.

use std::f64::consts::PI;

use crate::error::{MofsError, Result};

#[derive(Debug, Clone)]
pub struct SpectralPlan {
    pub h: usize,
    pub w: usize,
    pub m1: usize,
    pub m2: usize,
    /// Row frequency (mod H) for each retained row-mode slot.
    pub kx: Vec<usize>,
    /// `e^{-2πi·ky·q/W}` as (re, im), indexed `[ky][q]`.
    ew: Vec<(f64, f64)>,
    /// `e^{-2πi·kx·p/H}` as (re, im), indexed `[slot][p]`.
    eh: Vec<(f64, f64)>,
    /// Multiplicity of each column mode in the real inverse, divided by `H·W`.
    inv_weight: Vec<f64>,
}

impl SpectralPlan {
    pub fn new(h: usize, w: usize, m1: usize, m2: usize) -> Result<Self> {
        if m1 == 0 || m2 == 0 {
            return Err(MofsError::Config("spectral modes must be positive".into()));
        }
        if m1 > h.div_ceil(2) || m2 > w / 2 + 1 || 2 * m1 > h {
            return Err(MofsError::Config(format!(
                "modes ({m1},{m2}) exceed the {h}x{w} grid (need m1 <= H/2, m2 <= W/2+1)"
            )));
        }
        let kx: Vec<usize> = (0..m1).chain(h - m1..h).collect();
        let mut ew = Vec::with_capacity(m2 * w);
        for ky in 0..m2 {
            for q in 0..w {
                let t = -2.0 * PI * ((ky * q) % w) as f64 / w as f64;
                ew.push((t.cos(), t.sin()));
            }
        }
        let mut eh = Vec::with_capacity(kx.len() * h);
        for &k in &kx {
            for p in 0..h {
                let t = -2.0 * PI * ((k * p) % h) as f64 / h as f64;
                eh.push((t.cos(), t.sin()));
            }
        }
        let hw = (h * w) as f64;
        let inv_weight = (0..m2)
            .map(|ky| {
                let mult = if ky == 0 || (w % 2 == 0 && ky == w / 2) { 1.0 } else { 2.0 };
                mult / hw
            })
            .collect();
        Ok(Self { h, w, m1, m2, kx, ew, eh, inv_weight })
    }

    pub fn n_slots(&self) -> usize {
        self.kx.len()
    }

    pub fn n_modes(&self) -> usize {
        self.kx.len() * self.m2
    }

    /// Truncated forward DFT of each channel of a token-layout map.
    /// Returns (re, im) indexed `[ch][slot][ky]`.
    pub fn forward(&self, x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
        let (h, w, m2, ns) = (self.h, self.w, self.m2, self.n_slots());
        // along columns: a[p][ky][ch]
        let mut ar = vec![0.0; h * m2 * c];
        let mut ai = vec![0.0; h * m2 * c];
        for p in 0..h {
            for q in 0..w {
                let row = &x[(p * w + q) * c..(p * w + q + 1) * c];
                for ky in 0..m2 {
                    let (cr, ci) = self.ew[ky * w + q];
                    let base = (p * m2 + ky) * c;
                    for (ch, &v) in row.iter().enumerate() {
                        ar[base + ch] += v * cr;
                        ai[base + ch] += v * ci;
                    }
                }
            }
        }
        let mut xr = vec![0.0; c * ns * m2];
        let mut xi = vec![0.0; c * ns * m2];
        for s in 0..ns {
            for p in 0..h {
                let (er, ei) = self.eh[s * h + p];
                for ky in 0..m2 {
                    let base = (p * m2 + ky) * c;
                    for ch in 0..c {
                        let (vr, vi) = (ar[base + ch], ai[base + ch]);
                        let o = (ch * ns + s) * m2 + ky;
                        xr[o] += vr * er - vi * ei;
                        xi[o] += vr * ei + vi * er;
                    }
                }
            }
        }
        (xr, xi)
    }

    /// Real inverse over retained modes: `y[p,q,ch] = Σ_k wk·Re(Y[ch,k]·e^{+iθ})`
    /// where `wk` is `col_weight[ky]`.
    pub fn inverse(&self, yr: &[f64], yi: &[f64], c: usize, col_weight: &[f64]) -> Vec<f64> {
        let (h, w, m2, ns) = (self.h, self.w, self.m2, self.n_slots());
        // along rows: b[p][ky][ch] = Σ_s Y[ch][s][ky]·conj(eh[s][p])
        let mut br = vec![0.0; h * m2 * c];
        let mut bi = vec![0.0; h * m2 * c];
        for s in 0..ns {
            for p in 0..h {
                let (er, ei) = self.eh[s * h + p];
                let (er, ei) = (er, -ei);
                for ky in 0..m2 {
                    let base = (p * m2 + ky) * c;
                    for ch in 0..c {
                        let o = (ch * ns + s) * m2 + ky;
                        let (vr, vi) = (yr[o], yi[o]);
                        br[base + ch] += vr * er - vi * ei;
                        bi[base + ch] += vr * ei + vi * er;
                    }
                }
            }
        }
        let mut out = vec![0.0; h * w * c];
        for p in 0..h {
            for q in 0..w {
                let dst = &mut out[(p * w + q) * c..(p * w + q + 1) * c];
                for ky in 0..m2 {
                    let (cr, ci) = self.ew[ky * w + q];
                    // Re(b · e^{+iθ}) = br·cos θ − bi·sin θ, with ew = (cos θ, −sin θ)
                    let (cr, ci) = (cr * col_weight[ky], -ci * col_weight[ky]);
                    let base = (p * m2 + ky) * c;
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d += br[base + ch] * cr - bi[base + ch] * ci;
                    }
                }
            }
        }
        out
    }

    pub fn inverse_weights(&self) -> &[f64] {
        &self.inv_weight
    }

    /// Full spectral convolution of a `(H·W)×c_in` map.
    pub fn apply(
        &self,
        x: &[f64],
        c_in: usize,
        c_out: usize,
        wre: &[f64],
        wim: &[f64],
    ) -> Vec<f64> {
        let (xr, xi) = self.forward(x, c_in);
        let (yr, yi) = self.mix(&xr, &xi, c_in, c_out, wre, wim);
        self.inverse(&yr, &yi, c_out, &self.inv_weight)
    }

    /// `Y[o,k] = Σ_i X[i,k]·W[i,o,k]`.
    pub fn mix(
        &self,
        xr: &[f64],
        xi: &[f64],
        c_in: usize,
        c_out: usize,
        wre: &[f64],
        wim: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let nm = self.n_modes();
        let mut yr = vec![0.0; c_out * nm];
        let mut yi = vec![0.0; c_out * nm];
        for i in 0..c_in {
            let xr_i = &xr[i * nm..(i + 1) * nm];
            let xi_i = &xi[i * nm..(i + 1) * nm];
            for o in 0..c_out {
                let wr = &wre[(i * c_out + o) * nm..(i * c_out + o + 1) * nm];
                let wi = &wim[(i * c_out + o) * nm..(i * c_out + o + 1) * nm];
                let yr_o = &mut yr[o * nm..(o + 1) * nm];
                for k in 0..nm {
                    yr_o[k] += xr_i[k] * wr[k] - xi_i[k] * wi[k];
                }
                let yi_o = &mut yi[o * nm..(o + 1) * nm];
                for k in 0..nm {
                    yi_o[k] += xr_i[k] * wi[k] + xi_i[k] * wr[k];
                }
            }
        }
        (yr, yi)
    }

    /// Gradients of the spectral convolution: `(gx, gwre, gwim)`.
    pub fn backward(
        &self,
        x: &[f64],
        gy: &[f64],
        c_in: usize,
        c_out: usize,
        wre: &[f64],
        wim: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let nm = self.n_modes();
        let m2 = self.m2;
        let (xr, xi) = self.forward(x, c_in);
        // adjoint of the real inverse: a scaled forward DFT of gy
        let (mut gyr, mut gyi) = self.forward(gy, c_out);
        for o in 0..c_out {
            for k in 0..nm {
                let s = self.inv_weight[k % m2];
                gyr[o * nm + k] *= s;
                gyi[o * nm + k] *= s;
            }
        }
        let mut gwr = vec![0.0; c_in * c_out * nm];
        let mut gwi = vec![0.0; c_in * c_out * nm];
        let mut gxr = vec![0.0; c_in * nm];
        let mut gxi = vec![0.0; c_in * nm];
        for i in 0..c_in {
            for o in 0..c_out {
                let base = (i * c_out + o) * nm;
                for k in 0..nm {
                    let (ar, ai) = (xr[i * nm + k], xi[i * nm + k]);
                    let (br, bi) = (gyr[o * nm + k], gyi[o * nm + k]);
                    // conj(X)·gY
                    gwr[base + k] = ar * br + ai * bi;
                    gwi[base + k] = ar * bi - ai * br;
                    // conj(W)·gY
                    let (wr, wi) = (wre[base + k], wim[base + k]);
                    gxr[i * nm + k] += wr * br + wi * bi;
                    gxi[i * nm + k] += wr * bi - wi * br;
                }
            }
        }
        let ones = vec![1.0; m2];
        let gx = self.inverse(&gxr, &gxi, c_in, &ones);
        (gx, gwr, gwi)
    }
}

/// 3×3 zero-padded patch extraction: `(h·w)×c → (h·w)×(9c)`.
pub fn im2col3(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 9 * c];
    for p in 0..h {
        for q in 0..w {
            let dst = (p * w + q) * 9 * c;
            for dy in 0..3 {
                let pp = p as isize + dy as isize - 1;
                if pp < 0 || pp >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let qq = q as isize + dx as isize - 1;
                    if qq < 0 || qq >= w as isize {
                        continue;
                    }
                    let src = (pp as usize * w + qq as usize) * c;
                    let k = dy * 3 + dx;
                    out[dst + k * c..dst + (k + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub fn col2im3(g: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for p in 0..h {
        for q in 0..w {
            let src = (p * w + q) * 9 * c;
            for dy in 0..3 {
                let pp = p as isize + dy as isize - 1;
                if pp < 0 || pp >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let qq = q as isize + dx as isize - 1;
                    if qq < 0 || qq >= w as isize {
                        continue;
                    }
                    let dst = (pp as usize * w + qq as usize) * c;
                    let k = dy * 3 + dx;
                    for ch in 0..c {
                        out[dst + ch] += g[src + k * c + ch];
                    }
                }
            }
        }
    }
    out
}
