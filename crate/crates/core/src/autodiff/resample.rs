//! Fixed sparse linear maps over spatial rows (resizing, pooling, upsampling).

#[derive(Debug, Clone)]
pub struct ResampleMap {
    pub in_rows: usize,
    pub out_rows: usize,
    /// `(out_row, in_row, weight)` triples.
    pub entries: Vec<(usize, usize, f64)>,
}

impl ResampleMap {
    pub fn identity(n: usize) -> Self {
        Self { in_rows: n, out_rows: n, entries: (0..n).map(|i| (i, i, 1.0)).collect() }
    }

    /// Bilinear interpolation between grids, aligning corners.
    pub fn bilinear(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Self {
        if h_in == h_out && w_in == w_out {
            return Self::identity(h_in * w_in);
        }
        let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (x.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, x - lo as f64)
        };
        let mut entries = Vec::with_capacity(h_out * w_out * 4);
        for p in 0..h_out {
            let (p0, p1, fp) = coord(p, h_out, h_in);
            for q in 0..w_out {
                let (q0, q1, fq) = coord(q, w_out, w_in);
                let out = p * w_out + q;
                let taps = [
                    (p0, q0, (1.0 - fp) * (1.0 - fq)),
                    (p0, q1, (1.0 - fp) * fq),
                    (p1, q0, fp * (1.0 - fq)),
                    (p1, q1, fp * fq),
                ];
                for (pp, qq, wgt) in taps {
                    if wgt != 0.0 {
                        entries.push((out, pp * w_in + qq, wgt));
                    }
                }
            }
        }
        Self { in_rows: h_in * w_in, out_rows: h_out * w_out, entries }
    }

    /// 2×2 average pooling (grid sides must be even).
    pub fn avg_pool2(h: usize, w: usize) -> Self {
        let (ho, wo) = (h / 2, w / 2);
        let mut entries = Vec::with_capacity(h * w);
        for p in 0..ho {
            for q in 0..wo {
                for (dp, dq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    entries.push((p * wo + q, (2 * p + dp) * w + 2 * q + dq, 0.25));
                }
            }
        }
        Self { in_rows: h * w, out_rows: ho * wo, entries }
    }

    /// Nearest-neighbour 2× upsampling from an `h×w` grid.
    pub fn upsample2(h: usize, w: usize) -> Self {
        let (ho, wo) = (2 * h, 2 * w);
        let entries = (0..ho * wo)
            .map(|o| {
                let (p, q) = (o / wo, o % wo);
                (o, (p / 2) * w + q / 2, 1.0)
            })
            .collect();
        Self { in_rows: h * w, out_rows: ho * wo, entries }
    }

    pub fn apply(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows * cols];
        for &(o, i, w) in &self.entries {
            for c in 0..cols {
                out[o * cols + c] += w * x[i * cols + c];
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.in_rows * cols];
        for &(o, i, w) in &self.entries {
            for c in 0..cols {
                out[i * cols + c] += w * g[o * cols + c];
            }
        }
        out
    }
}
