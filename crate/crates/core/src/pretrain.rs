//! Masked spatial reconstruction and frequency-magnitude pretraining.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Field, OperatorDataset, Sample};
use crate::error::{MofsError, Result};
use crate::fno::{FnoConfig, FnoEncoder};
use crate::losses;
use crate::nn::{Grid, Mlp};
use crate::optim::{cosine_lr, Adam};
use crate::params::ParamStore;
use crate::spectral::magnitude_spectrum;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    /// `(H·W)×1`, 1 = visible.
    pub m_a: Tensor,
    pub m_u: Tensor,
    pub rho: f64,
}

/// Bernoulli keep-mask with keep probability `1 − rho`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, rho: f64, rng: &mut R) -> Tensor {
    Tensor::column((0..n).map(|_| if rng.random::<f64>() < rho { 0.0 } else { 1.0 }).collect())
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(MofsError::Config(format!("masking ratio must lie in (0,1), got {rho}")))
    }
}

/// `(a ⊙ M_a, u ⊙ M_u, masks)`, deterministic in `seed`.
pub fn apply_mask(a: &Field, u: &Field, rho: f64, seed: u64) -> Result<(Field, Field, MaskPair)> {
    check_rho(rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_a = sample_mask(a.len(), rho, &mut rng);
    let m_u = sample_mask(u.len(), rho, &mut rng);
    let mask = |f: &Field, m: &Tensor| {
        let (h, w) = f.dims();
        Field::new(h, w, f.values().iter().zip(m.data()).map(|(v, k)| v * k).collect())
    };
    Ok((mask(a, &m_a)?, mask(u, &m_u)?, MaskPair { m_a, m_u, rho }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub fno: FnoConfig,
    pub rho: f64,
    pub alpha_freq: f64,
    pub eps: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { fno: FnoConfig::default(), rho: 0.5, alpha_freq: 0.5, eps: 1e-8, epochs: 10, lr: 1e-3, seed: 0 }
    }
}

/// Pointwise heads on the concatenated `2d` latent.
#[derive(Debug)]
pub struct PretrainHeads {
    pub psi_a: Mlp,
    pub psi_u: Mlp,
    pub freq: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainParts {
    pub spatial: f64,
    pub freq: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub spatial: f64,
    pub freq: f64,
    pub total: f64,
}

/// Reconstructions for one sample, used by the figure code.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub a: Field,
    pub u: Field,
    pub masks: MaskPair,
    pub a_hat: Field,
    pub u_hat: Field,
    pub f_hat: Field,
    pub f_true: Field,
}

/// Encoder plus heads in their own parameter store.
#[derive(Debug)]
pub struct Pretrainer {
    pub store: ParamStore,
    pub encoder: FnoEncoder,
    pub heads: PretrainHeads,
    pub grid: Grid,
    pub cfg: PretrainConfig,
}

struct Prepared {
    a: Tensor,
    u: Tensor,
    freq: Tensor,
    /// Normalised `a` is identically zero (constant family): the `a`
    /// reconstruction and spectrum targets are undefined and skipped.
    a_degenerate: bool,
}

fn prepare(ds: &OperatorDataset, s: &Sample) -> Prepared {
    let n = ds.normalizers.encode(s);
    let a_degenerate = n.a.values().iter().all(|&v| v == 0.0);
    Prepared {
        freq: Tensor::column(magnitude_spectrum(&n.a)),
        a: n.a.to_tensor(),
        u: n.u.to_tensor(),
        a_degenerate,
    }
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig, grid: Grid) -> Result<Self> {
        check_rho(cfg.rho)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = FnoEncoder::new(&mut store, "encoder", 1, cfg.fno, grid, &mut rng)?;
        let d = cfg.fno.d;
        let heads = PretrainHeads {
            psi_a: Mlp::new(&mut store, "pretrain/psi_a", 2 * d, d, 1, false, &mut rng),
            psi_u: Mlp::new(&mut store, "pretrain/psi_u", 2 * d, d, 1, false, &mut rng),
            freq: Mlp::new(&mut store, "pretrain/freq", 2 * d, d, 1, false, &mut rng),
        };
        Ok(Self { store, encoder, heads, grid, cfg })
    }

    fn heads_forward(&self, g: &mut Graph<'_>, a_m: Var, u_m: Var) -> Result<(Var, Var, Var)> {
        let fa = self.encoder.forward(g, a_m, self.grid)?;
        let fu = self.encoder.forward(g, u_m, self.grid)?;
        let f = g.concat_cols(&[fa, fu]);
        Ok((self.heads.psi_a.forward(g, f), self.heads.psi_u.forward(g, f), self.heads.freq.forward(g, f)))
    }

    fn loss(&self, g: &mut Graph<'_>, p: &Prepared, masks: &MaskPair) -> Result<(Var, PretrainParts)> {
        let a_m = g.constant(p.a.zip_map(&masks.m_a, |x, m| x * m));
        let u_m = g.constant(p.u.zip_map(&masks.m_u, |x, m| x * m));
        let (a_hat, u_hat, f_hat) = self.heads_forward(g, a_m, u_m)?;
        let a = g.constant(p.a.clone());
        let u = g.constant(p.u.clone());
        let mut spatial = losses::masked_term(g, u_hat, u, &masks.m_u, self.cfg.eps);
        let mut total = spatial;
        let mut freq_v = 0.0;
        if !p.a_degenerate {
            let ta = losses::masked_term(g, a_hat, a, &masks.m_a, self.cfg.eps);
            spatial = g.add(spatial, ta);
            let target = g.constant(p.freq.clone());
            let fl = losses::freq_loss(g, f_hat, target);
            freq_v = g.scalar(fl);
            let weighted = g.scale(fl, self.cfg.alpha_freq);
            total = g.add(spatial, weighted);
        }
        let parts = PretrainParts { spatial: g.scalar(spatial), freq: freq_v, total: g.scalar(total) };
        Ok((total, parts))
    }

    /// Loss on fixed masks without updating anything.
    pub fn evaluate(&self, datasets: &[OperatorDataset], seed: u64) -> Result<PretrainParts> {
        let mut acc = PretrainParts::default();
        let mut n = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ds in datasets {
            for s in &ds.samples {
                let p = prepare(ds, s);
                let masks = self.masks(&mut rng);
                let mut g = Graph::with_params(&self.store);
                let (_, parts) = self.loss(&mut g, &p, &masks)?;
                acc.spatial += parts.spatial;
                acc.freq += parts.freq;
                acc.total += parts.total;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        Ok(PretrainParts { spatial: acc.spatial / n, freq: acc.freq / n, total: acc.total / n })
    }

    fn masks<R: Rng + ?Sized>(&self, rng: &mut R) -> MaskPair {
        let n = self.grid.tokens();
        MaskPair { m_a: sample_mask(n, self.cfg.rho, rng), m_u: sample_mask(n, self.cfg.rho, rng), rho: self.cfg.rho }
    }

    /// One pass over every sample of every dataset, one update per sample.
    pub fn epoch(&mut self, datasets: &[OperatorDataset], epoch: usize, opt: &mut Adam) -> Result<PretrainRecord> {
        if datasets.is_empty() {
            return Err(MofsError::Config("pretraining needs at least one dataset".into()));
        }
        for ds in datasets {
            if ds.dims() != (self.grid.h, self.grid.w) {
                return Err(MofsError::Shape(format!("{} is {:?}, pretrainer expects {:?}", ds.name, ds.dims(), self.grid)));
            }
        }
        let mut order: Vec<(usize, usize)> =
            datasets.iter().enumerate().flat_map(|(k, d)| (0..d.len()).map(move |i| (k, i))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let total_steps = self.cfg.epochs.max(1) * order.len();
        let mut acc = PretrainParts::default();
        for &(k, i) in &order {
            let ds = &datasets[k];
            let p = prepare(ds, &ds.samples[i]);
            let masks = self.masks(&mut rng);
            let (grads, parts) = {
                let mut g = Graph::with_params(&self.store);
                let (loss, parts) = self.loss(&mut g, &p, &masks)?;
                if !parts.total.is_finite() {
                    return Err(MofsError::NonFinite(format!(
                        "pretraining loss for {} sample {i} (spatial {}, freq {})",
                        ds.name, parts.spatial, parts.freq
                    )));
                }
                (g.backward(loss), parts)
            };
            let lr = cosine_lr(self.cfg.lr, opt.steps() as usize, total_steps);
            opt.step(&mut self.store, &grads, lr);
            acc.spatial += parts.spatial;
            acc.freq += parts.freq;
            acc.total += parts.total;
        }
        let n = order.len() as f64;
        let rec = PretrainRecord { epoch, spatial: acc.spatial / n, freq: acc.freq / n, total: acc.total / n };
        debug!("pretrain epoch {epoch}: {rec:?}");
        Ok(rec)
    }

    pub fn train(&mut self, datasets: &[OperatorDataset]) -> Result<Vec<PretrainRecord>> {
        let mut opt = Adam::default();
        let mut trace = Vec::with_capacity(self.cfg.epochs);
        for e in 0..self.cfg.epochs {
            trace.push(self.epoch(datasets, e, &mut opt)?);
        }
        if let Some(last) = trace.last() {
            info!("pretraining finished: L_pretrain {:.4}", last.total);
        }
        Ok(trace)
    }

    pub fn reconstruct(&self, ds: &OperatorDataset, index: usize, seed: u64) -> Result<Reconstruction> {
        let s = ds.samples.get(index).ok_or_else(|| MofsError::Config(format!("{} has no sample {index}", ds.name)))?;
        let n = ds.normalizers.encode(s);
        let (_, _, masks) = apply_mask(&n.a, &n.u, self.cfg.rho, seed)?;
        let p = prepare(ds, s);
        let mut g = Graph::with_params(&self.store);
        let a_m = g.constant(p.a.zip_map(&masks.m_a, |x, m| x * m));
        let u_m = g.constant(p.u.zip_map(&masks.m_u, |x, m| x * m));
        let (a_hat, u_hat, f_hat) = self.heads_forward(&mut g, a_m, u_m)?;
        let (h, w) = (self.grid.h, self.grid.w);
        Ok(Reconstruction {
            a: n.a.clone(),
            u: n.u.clone(),
            a_hat: Field::from_tensor(g.value(a_hat), h, w)?,
            u_hat: Field::from_tensor(g.value(u_hat), h, w)?,
            f_hat: Field::from_tensor(g.value(f_hat), h, w)?,
            f_true: Field::new(h, w, p.freq.into_data())?,
            masks,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            serde_json::json!({
                "kind": "pretrain",
                "config": self.cfg,
                "grid": [self.grid.h, self.grid.w],
            }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: PretrainConfig = serde_json::from_value(ck.manifest["config"].clone())?;
        let grid: (usize, usize) = serde_json::from_value(ck.manifest["grid"].clone())?;
        let mut p = Self::new(cfg, Grid::new(grid.0, grid.1))?;
        ck.load_into(&mut p.store, "")?;
        Ok(p)
    }
}

pub fn write_trace_csv(trace: &[PretrainRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,L_spatial,L_freq,L_pretrain")?;
    for r in trace {
        writeln!(f, "{},{:.8e},{:.8e},{:.8e}", r.epoch, r.spatial, r.freq, r.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use crate::data::{generate_darcy, generate_navier_stokes, NsParams};

    fn small_cfg() -> PretrainConfig {
        PretrainConfig { fno: FnoConfig { d: 4, blocks: 2, m1: 2, m2: 2 }, epochs: 1, ..Default::default() }
    }

    #[test]
    fn tiny_ratio_keeps_everything() {
        let a = Field::from_fn(8, 8, |i, j| (i + 2 * j) as f64).unwrap();
        let (am, _, m) = apply_mask(&a, &a, 1e-12, 3).unwrap();
        assert_eq!(am, a);
        assert!(m.m_a.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_pixels_are_zero_and_ratio_is_binomial() {
        let a = Field::filled(32, 32, 7.0);
        let (am, _, m) = apply_mask(&a, &a, 0.5, 1).unwrap();
        for (v, k) in am.values().iter().zip(m.m_a.data()) {
            assert_eq!(*v, if *k == 0.0 { 0.0 } else { 7.0 });
        }
        let zeros = m.m_a.data().iter().filter(|&&k| k == 0.0).count() as f64;
        let sigma = (1024.0f64 * 0.25).sqrt();
        assert!((zeros - 512.0).abs() <= 3.0 * sigma);
        assert!(apply_mask(&a, &a, 1.0, 0).is_err());
    }

    #[test]
    fn alpha_zero_matches_spatial_only() {
        let ds = vec![generate_navier_stokes(0, 2, 8, 8, NsParams { t_final: 0.2, n_steps: 4, ..Default::default() }).unwrap()];
        let run = |alpha: f64| {
            let mut p = Pretrainer::new(PretrainConfig { alpha_freq: alpha, ..small_cfg() }, Grid::new(8, 8)).unwrap();
            let t = p.train(&ds).unwrap();
            (t[0].spatial, t[0].total)
        };
        let (s, t) = run(0.0);
        assert_eq!(s, t);
    }

    #[test]
    fn loss_drops_on_a_fixed_batch() {
        let ds = vec![generate_darcy(10.0, 4, 16, 16, 2).unwrap()];
        let mut p = Pretrainer::new(
            PretrainConfig { fno: FnoConfig { d: 8, blocks: 2, m1: 4, m2: 4 }, epochs: 13, lr: 3e-3, ..Default::default() },
            Grid::new(16, 16),
        )
        .unwrap();
        let before = p.evaluate(&ds, 99).unwrap().total;
        p.train(&ds).unwrap();
        let after = p.evaluate(&ds, 99).unwrap().total;
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn gradient_wrt_encoder_weights() {
        let ds = generate_darcy(10.0, 1, 8, 8, 0).unwrap();
        let mut p = Pretrainer::new(small_cfg(), Grid::new(8, 8)).unwrap();
        let prep = prepare(&ds, &ds.samples[0]);
        let masks = p.masks(&mut ChaCha8Rng::seed_from_u64(1));
        let ids = p.encoder.ids();
        let mut store = std::mem::take(&mut p.store);
        let (err, name) = GradCheck::default().params(&mut store, &ids, |g| p.loss(g, &prep, &masks).unwrap().0);
        assert!(err < 1e-3, "{name}: {err}");
    }

    #[test]
    fn constant_family_skips_input_targets() {
        let ds = generate_darcy(1.0, 1, 8, 8, 0).unwrap();
        let p = Pretrainer::new(small_cfg(), Grid::new(8, 8)).unwrap();
        let parts = p.evaluate(&[ds], 0).unwrap();
        assert_eq!(parts.freq, 0.0);
        assert!(parts.total.is_finite() && parts.total < 10.0);
    }
}
