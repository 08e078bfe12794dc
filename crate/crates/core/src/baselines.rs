//! Reference operators trained without prompting: mean field, FNO, DeepONet, UNet.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ResampleMap, Var};
use crate::data::{Field, NormalizerStats, Sample};
use crate::error::{MofsError, Result};
use crate::fno::{FnoConfig, FnoEncoder};
use crate::nn::{Conv3x3, Grid, Linear, Mlp};
use crate::optim::{cosine_lr, Adam};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineKind {
    Mean,
    Fno,
    DeepOnet,
    Unet,
}

impl BaselineKind {
    pub const LEARNED: [BaselineKind; 3] = [BaselineKind::Fno, BaselineKind::DeepOnet, BaselineKind::Unet];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mean => "Mean",
            BaselineKind::Fno => "FNO",
            BaselineKind::DeepOnet => "DeepONet",
            BaselineKind::Unet => "UNet",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = MofsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "fno" => Ok(Self::Fno),
            "deeponet" => Ok(Self::DeepOnet),
            "unet" => Ok(Self::Unet),
            other => Err(MofsError::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

/// A training sample in both unit systems.
#[derive(Debug, Clone)]
pub struct PoolSample {
    pub normalized: Sample,
    pub physical_u: Field,
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineConfig {
    pub d: usize,
    pub modes: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

enum Net {
    Fno { enc: FnoEncoder, dec: Mlp },
    DeepOnet { branch: Mlp, trunk: Mlp, bias: ParamId },
    Unet { down: [Conv3x3; 2], mid: [Conv3x3; 2], up: Conv3x3, head: Linear },
}

/// Pointwise mean field in physical units.
#[derive(Debug, Clone)]
pub struct MeanPredictor {
    pub mean: Field,
}

impl MeanPredictor {
    pub fn fit(pool: &[PoolSample]) -> Result<Self> {
        let first = pool.first().ok_or(MofsError::NoDemonstrations)?;
        let (h, w) = first.physical_u.dims();
        let mut acc = vec![0.0; h * w];
        for s in pool {
            for (a, v) in acc.iter_mut().zip(s.physical_u.values()) {
                *a += v;
            }
        }
        let n = pool.len() as f64;
        Ok(Self { mean: Field::new(h, w, acc.into_iter().map(|v| v / n).collect())? })
    }
}

/// A learned baseline acting on normalised fields.
pub struct Baseline {
    pub kind: BaselineKind,
    pub store: ParamStore,
    grid: Grid,
    coords: Tensor,
    net: Net,
}

/// `(H·W)×2` coordinates in `[0,1]`, columns `(x, y)`.
pub fn coordinates(grid: Grid) -> Tensor {
    let span = |n: usize, i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    Tensor::from_fn(grid.tokens(), 2, |r, c| {
        let (i, j) = (r / grid.w, r % grid.w);
        if c == 0 {
            span(grid.w, j)
        } else {
            span(grid.h, i)
        }
    })
}

impl Baseline {
    pub fn new(kind: BaselineKind, grid: Grid, cfg: &BaselineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e);
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = cfg.d;
        let net = match kind {
            BaselineKind::Mean => return Err(MofsError::Config("the mean predictor has no network".into())),
            BaselineKind::Fno => {
                let fno = FnoConfig { d, blocks: cfg.blocks, m1: cfg.modes, m2: cfg.modes };
                Net::Fno {
                    enc: FnoEncoder::new(s, "fno/encoder", 3, fno, grid, &mut rng)?,
                    dec: Mlp::new(s, "fno/decoder", d, d, 1, true, &mut rng),
                }
            }
            BaselineKind::DeepOnet => Net::DeepOnet {
                branch: Mlp::new(s, "deeponet/branch", grid.tokens(), 2 * d, d, true, &mut rng),
                trunk: Mlp::new(s, "deeponet/trunk", 2, 2 * d, d, true, &mut rng),
                bias: s.add("deeponet/bias", Tensor::zeros(1, 1)),
            },
            BaselineKind::Unet => {
                if grid.h % 2 != 0 || grid.w % 2 != 0 {
                    return Err(MofsError::Config(format!("UNet needs even sides, got {}x{}", grid.h, grid.w)));
                }
                let c = (d / 2).max(4);
                Net::Unet {
                    down: [Conv3x3::new(s, "unet/down0", 1, c, &mut rng), Conv3x3::new(s, "unet/down1", c, c, &mut rng)],
                    mid: [
                        Conv3x3::new(s, "unet/mid0", c, 2 * c, &mut rng),
                        Conv3x3::new(s, "unet/mid1", 2 * c, 2 * c, &mut rng),
                    ],
                    up: Conv3x3::new(s, "unet/up", 3 * c, c, &mut rng),
                    head: Linear::new(s, "unet/head", c, 1, true, &mut rng),
                }
            }
        };
        Ok(Self { kind, store, grid, coords: coordinates(grid), net })
    }

    /// Normalised `(H·W)×1` output for a normalised input column.
    pub fn forward(&self, g: &mut Graph<'_>, a: Var) -> Result<Var> {
        let grid = self.grid;
        Ok(match &self.net {
            Net::Fno { enc, dec } => {
                let xy = g.constant(self.coords.clone());
                let x = g.concat_cols(&[a, xy]);
                let h = enc.forward(g, x, grid)?;
                let h = g.gelu(h);
                dec.forward(g, h)
            }
            Net::DeepOnet { branch, trunk, bias } => {
                let flat = g.reshape(a, 1, grid.tokens());
                let b = branch.forward(g, flat);
                let xy = g.constant(self.coords.clone());
                let t = trunk.forward(g, xy);
                let t = g.gelu(t);
                let y = g.matmul_t(t, b);
                let bv = g.param(*bias);
                g.add_row(y, bv)
            }
            Net::Unet { down, mid, up, head } => {
                let half = Grid::new(grid.h / 2, grid.w / 2);
                let mut x1 = a;
                for conv in down {
                    let y = conv.forward(g, x1, grid);
                    x1 = g.gelu(y);
                }
                let mut x2 = g.resample(x1, Rc::new(ResampleMap::avg_pool2(grid.h, grid.w)));
                for conv in mid {
                    let y = conv.forward(g, x2, half);
                    x2 = g.gelu(y);
                }
                let upx = g.resample(x2, Rc::new(ResampleMap::upsample2(half.h, half.w)));
                let cat = g.concat_cols(&[upx, x1]);
                let y = up.forward(g, cat, grid);
                let y = g.gelu(y);
                head.forward(g, y)
            }
        })
    }

    /// Mean squared error in normalised units, one update per sample.
    pub fn fit(&mut self, pool: &[PoolSample], cfg: &BaselineConfig) -> Result<Vec<f64>> {
        if pool.is_empty() {
            return Err(MofsError::NoDemonstrations);
        }
        let mut opt = Adam::default();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let total = cfg.epochs * pool.len();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e_11ee);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            let mut acc = 0.0;
            for &i in &order {
                let s = &pool[i].normalized;
                let (grads, loss) = {
                    let mut g = Graph::with_params(&self.store);
                    let a = g.constant(s.a.to_tensor());
                    let y = self.forward(&mut g, a)?;
                    let t = g.constant(s.u.to_tensor());
                    let e = g.sub(y, t);
                    let sq = g.square(e);
                    let l = g.mean_all(sq);
                    let lv = g.scalar(l);
                    if !lv.is_finite() {
                        return Err(MofsError::NonFinite(format!("{} baseline loss at epoch {epoch}", self.kind)));
                    }
                    (g.backward(l), lv)
                };
                let lr = cosine_lr(cfg.lr, opt.steps() as usize, total);
                opt.step(&mut self.store, &grads, lr);
                acc += loss;
            }
            trace.push(acc / pool.len() as f64);
        }
        debug!("{} baseline final mse {:?}", self.kind, trace.last());
        Ok(trace)
    }

    /// Physical prediction for a normalised input, de-normalised with `u_norm`.
    pub fn predict(&self, a_norm: &Field, u_norm: &NormalizerStats) -> Result<Field> {
        let mut g = Graph::with_params(&self.store);
        let a = g.constant(a_norm.to_tensor());
        let y = self.forward(&mut g, a)?;
        let f = Field::from_tensor(g.value(y), self.grid.h, self.grid.w)?;
        Ok(u_norm.decode(&f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use crate::data::generate_darcy;
    use crate::losses::relative_l2_error;

    fn pool_of(samples: &[Sample], norm: &crate::data::Normalizers) -> Vec<PoolSample> {
        samples.iter().map(|s| PoolSample { normalized: norm.encode(s), physical_u: s.u.clone() }).collect()
    }

    #[test]
    fn mean_predictor_is_the_pixelwise_average() {
        let f = |v: f64| Field::filled(4, 4, v);
        let s = |v: f64| PoolSample { normalized: Sample { a: f(0.0), u: f(0.0) }, physical_u: f(v) };
        let m = MeanPredictor::fit(&[s(1.0), s(2.0), s(6.0)]).unwrap();
        assert_eq!(m.mean, f(3.0));
        assert!(MeanPredictor::fit(&[]).is_err());
    }

    #[test]
    fn kinds_parse_and_unet_rejects_odd_grids() {
        assert_eq!("DeepONet".parse::<BaselineKind>().unwrap(), BaselineKind::DeepOnet);
        assert!("resnet".parse::<BaselineKind>().is_err());
        let cfg = BaselineConfig { d: 4, modes: 2, blocks: 1, epochs: 1, lr: 1e-3, seed: 0 };
        assert!(Baseline::new(BaselineKind::Unet, Grid::new(9, 9), &cfg).is_err());
        assert!(Baseline::new(BaselineKind::Mean, Grid::new(8, 8), &cfg).is_err());
    }

    #[test]
    fn coordinates_span_the_unit_square() {
        let c = coordinates(Grid::new(3, 5));
        assert_eq!(c.row_slice(0), &[0.0, 0.0]);
        assert_eq!(c.row_slice(4), &[1.0, 0.0]);
        assert_eq!(c.row_slice(14), &[1.0, 1.0]);
        assert_eq!(c.row_slice(7), &[0.5, 0.5]);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let grid = Grid::new(8, 8);
        let cfg = BaselineConfig { d: 4, modes: 2, blocks: 2, epochs: 1, lr: 1e-3, seed: 1 };
        let a = Tensor::from_fn(64, 1, |r, _| ((r * 7 % 11) as f64 - 5.0) / 5.0);
        for kind in BaselineKind::LEARNED {
            let mut b = Baseline::new(kind, grid, &cfg).unwrap();
            let ids: Vec<ParamId> = b.store.ids().collect();
            let net = std::mem::replace(&mut b.store, ParamStore::new());
            let mut store = net;
            let (err, name) = GradCheck::default().params(&mut store, &ids, |g| {
                let x = g.constant(a.clone());
                let y = b.forward(g, x).unwrap();
                let sq = g.square(y);
                g.sum_all(sq)
            });
            assert!(err < 1e-3, "{kind}: {name} {err}");
        }
    }

    #[test]
    fn fno_baseline_learns_a_single_darcy_family() {
        let ds = generate_darcy(1.0, 24, 16, 16, 5).unwrap();
        let (train, test) = ds.samples.split_at(18);
        let pool = pool_of(train, &ds.normalizers);
        let cfg = BaselineConfig { d: 16, modes: 6, blocks: 3, epochs: 40, lr: 3e-3, seed: 0 };
        let t = std::time::Instant::now();
        let mut b = Baseline::new(BaselineKind::Fno, Grid::new(16, 16), &cfg).unwrap();
        b.fit(&pool, &cfg).unwrap();
        let err: f64 = test
            .iter()
            .map(|s| {
                let p = b.predict(&ds.normalizers.a.encode(&s.a), &ds.normalizers.u).unwrap();
                relative_l2_error(&p, &s.u)
            })
            .sum::<f64>()
            / test.len() as f64;
        assert!(err < 0.5, "relative L2 {err}");
        assert!(t.elapsed().as_secs() < 120);
    }
}
