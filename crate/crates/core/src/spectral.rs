//! Two-dimensional discrete Fourier transform.
//!
//! Convention used across the crate: the forward transform is unnormalised,
//! the inverse carries the `1/(H·W)` factor.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::data::Field;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn at(&self, kx: usize, ky: usize) -> Complex64 {
        self.data[kx * self.w + ky]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

fn transform(h: usize, w: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (fw, fh) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_mut(w) {
        fw.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        fh.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
}

/// Forward transform of a real grid given as a row-major slice.
pub fn dft2_raw(values: &[f64], h: usize, w: usize) -> Spectrum {
    assert_eq!(values.len(), h * w);
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(h, w, &mut data, false);
    Spectrum { h, w, data }
}

pub fn dft2(field: &Field) -> Spectrum {
    dft2_raw(field.values(), field.height(), field.width())
}

/// Forward transform of a complex grid.
pub fn dft2_complex(mut data: Vec<Complex64>, h: usize, w: usize) -> Spectrum {
    transform(h, w, &mut data, false);
    Spectrum { h, w, data }
}

/// Inverse transform, including the `1/(H·W)` factor. Returns the complex grid.
pub fn idft2(spec: &Spectrum) -> Vec<Complex64> {
    let mut data = spec.data.clone();
    transform(spec.h, spec.w, &mut data, true);
    let s = 1.0 / (spec.h * spec.w) as f64;
    data.iter_mut().for_each(|c| *c *= s);
    data
}

/// `|F(a)|` on the same grid, without shifting or log scaling.
pub fn magnitude_spectrum(field: &Field) -> Vec<f64> {
    dft2(field).magnitude()
}
