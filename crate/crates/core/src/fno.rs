//! Fourier neural operator encoder and learnable positional encoding.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::resample::ResampleMap;
use crate::autodiff::spectral::SpectralPlan;
use crate::autodiff::{Graph, Var};
use crate::error::{MofsError, Result};
use crate::nn::{Grid, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub d: usize,
    pub blocks: usize,
    pub m1: usize,
    pub m2: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self { d: 32, blocks: 4, m1: 8, m2: 8 }
    }
}

/// Truncated Fourier-mode convolution plus a pointwise bypass.
#[derive(Debug)]
pub struct SpectralConvLayer {
    pub wre: ParamId,
    pub wim: ParamId,
    pub bypass: Linear,
    pub c_in: usize,
    pub c_out: usize,
    pub m1: usize,
    pub m2: usize,
    plans: RefCell<BTreeMap<Grid, Rc<SpectralPlan>>>,
}

impl SpectralConvLayer {
    /// Fails if the modes do not fit `grid`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        m1: usize,
        m2: usize,
        grid: Grid,
        rng: &mut R,
    ) -> Result<Self> {
        let plan = Rc::new(SpectralPlan::new(grid.h, grid.w, m1, m2)?);
        let nm = plan.n_modes();
        let std = 1.0 / (2.0 * c_in as f64).sqrt();
        let wre = store.add(format!("{name}/spec_re"), Tensor::randn(c_in * c_out, nm, std, rng));
        let wim = store.add(format!("{name}/spec_im"), Tensor::randn(c_in * c_out, nm, std, rng));
        let bypass = Linear::new(store, &format!("{name}/bypass"), c_in, c_out, false, rng);
        let plans = RefCell::new(BTreeMap::from([(grid, plan)]));
        Ok(Self { wre, wim, bypass, c_in, c_out, m1, m2, plans })
    }

    pub fn plan(&self, grid: Grid) -> Result<Rc<SpectralPlan>> {
        if let Some(p) = self.plans.borrow().get(&grid) {
            return Ok(p.clone());
        }
        let p = Rc::new(SpectralPlan::new(grid.h, grid.w, self.m1, self.m2)?);
        self.plans.borrow_mut().insert(grid, p.clone());
        Ok(p)
    }

    /// Spectral branch only.
    pub fn spectral(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Result<Var> {
        let plan = self.plan(grid)?;
        let wr = g.param(self.wre);
        let wi = g.param(self.wim);
        Ok(g.spectral_conv(x, wr, wi, plan))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Result<Var> {
        let s = self.spectral(g, x, grid)?;
        let b = self.bypass.forward(g, x);
        Ok(g.add(s, b))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.wre, self.wim];
        v.extend(self.bypass.ids());
        v
    }
}

/// `R^{1×H×W} → R^{d×H×W}`: pointwise lift then spectral blocks with GELU
/// between them. No biases, so the zero field maps to the zero latent.
#[derive(Debug)]
pub struct FnoEncoder {
    pub lift: Linear,
    pub blocks: Vec<SpectralConvLayer>,
    pub d: usize,
}

impl FnoEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: FnoConfig,
        grid: Grid,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d == 0 || cfg.blocks == 0 {
            return Err(MofsError::Config("encoder needs d > 0 and at least one block".into()));
        }
        let lift = Linear::new(store, &format!("{prefix}/lift"), in_channels, cfg.d, false, rng);
        let blocks = (0..cfg.blocks)
            .map(|b| SpectralConvLayer::new(store, &format!("{prefix}/block{b}"), cfg.d, cfg.d, cfg.m1, cfg.m2, grid, rng))
            .collect::<Result<_>>()?;
        Ok(Self { lift, blocks, d: cfg.d })
    }

    /// `x` is `(H·W)×in_channels`; returns `(H·W)×d`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Result<Var> {
        let mut h = self.lift.forward(g, x);
        let last = self.blocks.len() - 1;
        for (b, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, grid)?;
            if b != last {
                h = g.gelu(h);
            }
            if !g.value(h).all_finite() {
                return Err(MofsError::NonFinite(format!("encoder block {b}")));
            }
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.lift.ids();
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v
    }

    /// Parameters held fixed during stage 1: the lift and every block but the last.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let mut v = self.lift.ids();
        for b in &self.blocks[..self.blocks.len() - 1] {
            v.extend(b.ids());
        }
        v
    }
}

/// Learnable `P` tied to a reference grid; other grids see a bilinear resize.
#[derive(Debug)]
pub struct PositionalEncoding {
    pub p: ParamId,
    pub grid: Grid,
    maps: RefCell<BTreeMap<Grid, Rc<ResampleMap>>>,
}

impl PositionalEncoding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, grid: Grid, rng: &mut R) -> Self {
        let p = store.add(name.to_string(), Tensor::randn(grid.tokens(), d, 0.02, rng));
        Self { p, grid, maps: RefCell::new(BTreeMap::new()) }
    }

    pub fn encoding(&self, g: &mut Graph<'_>, grid: Grid) -> Var {
        let p = g.param(self.p);
        if grid == self.grid {
            return p;
        }
        let map = self
            .maps
            .borrow_mut()
            .entry(grid)
            .or_insert_with(|| Rc::new(ResampleMap::bilinear(self.grid.h, self.grid.w, grid.h, grid.w)))
            .clone();
        g.resample(p, map)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Var {
        let p = self.encoding(g, grid);
        g.add(x, p)
    }
}
