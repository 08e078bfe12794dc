//! Attention and fusion blocks over `n×d` token sequences.

use std::path::PathBuf;

use log::warn;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{MofsError, Result};
use crate::nn::{init_normal, Conv3x3, Grid, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const ETA_INIT: f64 = 0.1;

/// Image feature extractor producing `(H·W)×channels` tokens.
pub trait VisionBackbone: std::fmt::Debug {
    fn channels(&self) -> usize;
    fn features(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Var;
    fn ids(&self) -> Vec<ParamId>;
}

/// Four 3×3 convolutions with GELU between them.
#[derive(Debug)]
pub struct ConvBackbone {
    pub convs: Vec<Conv3x3>,
    pub width: usize,
}

impl ConvBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let convs = (0..4)
            .map(|i| Conv3x3::new(store, &format!("{name}/conv{i}"), if i == 0 { 1 } else { width }, width, rng))
            .collect();
        Self { convs, width }
    }
}

impl VisionBackbone for ConvBackbone {
    fn channels(&self) -> usize {
        self.width
    }

    fn features(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Var {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, h, grid);
            if i + 1 < self.convs.len() {
                h = g.gelu(h);
            }
        }
        h
    }

    fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.lin.ids()).collect()
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisionSource {
    /// Checkpoint holding `<name>/backbone/*` tensors.
    pub weights: Option<PathBuf>,
    pub strict: bool,
}

/// Backbone plus a pointwise projection to `d` channels.
#[derive(Debug)]
pub struct VisionEncoder {
    pub backbone: Box<dyn VisionBackbone>,
    pub proj: Linear,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        source: &VisionSource,
        rng: &mut R,
    ) -> Result<Self> {
        let prefix = format!("{name}/backbone");
        let backbone = ConvBackbone::new(store, &prefix, d.max(4) / 2, rng);
        let proj = Linear::new(store, &format!("{name}/proj"), backbone.width, d, false, rng);
        match &source.weights {
            Some(path) => {
                let loaded = Checkpoint::load(path).and_then(|ck| ck.load_into(store, &prefix));
                match loaded {
                    Ok(n) if n > 0 => {}
                    Ok(_) => Self::fallback(source.strict, &format!("{} holds no {prefix} tensors", path.display()))?,
                    Err(e) => Self::fallback(source.strict, &format!("{}: {e}", path.display()))?,
                }
            }
            None => Self::fallback(source.strict, "no backbone weights configured")?,
        }
        Ok(Self { backbone: Box::new(backbone), proj })
    }

    fn fallback(strict: bool, why: &str) -> Result<()> {
        if strict {
            return Err(MofsError::Config(format!("vision backbone unavailable: {why}")));
        }
        warn!("vision backbone unavailable ({why}); using the randomly initialised conv encoder");
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, grid: Grid) -> Var {
        let f = self.backbone.features(g, x, grid);
        self.proj.forward(g, f)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.ids();
        v.extend(self.proj.ids());
        v
    }
}

/// Per-token scalar gate `σ(W·[f_pos, v])` mixing two maps.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub w: ParamId,
}

impl GatedFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self { w: store.add(format!("{name}/w"), init_normal(2 * d, 1, 2 * d, rng)) }
    }

    pub fn gate(&self, g: &mut Graph<'_>, a: Var, b: Var) -> Var {
        let cat = g.concat_cols(&[a, b]);
        let w = g.param(self.w);
        let s = g.matmul(cat, w);
        g.sigmoid(s)
    }

    /// `g·f_pos + (1−g)·v`.
    pub fn forward(&self, g: &mut Graph<'_>, f_pos: Var, v: Var) -> Var {
        let gate = self.gate(g, f_pos, v);
        let diff = g.sub(f_pos, v);
        let scaled = g.mul_col(diff, gate);
        g.add(v, scaled)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w]
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(MofsError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let mut mk = |k: &str| store.add(format!("{name}/{k}"), init_normal(d, d, d, rng));
        Ok(Self { wq: mk("wq"), wk: mk("wk"), wv: mk("wv"), wo: mk("wo"), heads, d })
    }

    /// Per-head attention weights, each `n_q×n_kv`.
    pub fn weights(&self, g: &mut Graph<'_>, q: Var, kv: Var) -> Vec<Var> {
        self.run(g, q, kv).1
    }

    fn run(&self, g: &mut Graph<'_>, q: Var, kv: Var) -> (Var, Vec<Var>) {
        let dh = self.d / self.heads;
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let qp = g.matmul(q, wq);
        let kp = g.matmul(kv, wk);
        let vp = g.matmul(kv, wv);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(qp, lo, hi);
            let kh = g.slice_cols(kp, lo, hi);
            let vh = g.slice_cols(vp, lo, hi);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
            attn.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (g.matmul(cat, wo), attn)
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var, kv: Var) -> Var {
        self.run(g, q, kv).0
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// `γ(c) ⊙ x + β(c)`; `c` is a single row (broadcast) or one row per token.
#[derive(Debug, Clone)]
pub struct Film {
    pub gamma: Linear,
    pub beta: Linear,
}

impl Film {
    /// γ starts near the identity: small weights, unit bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let gamma = Linear::new(store, &format!("{name}/gamma"), d, d, true, rng);
        let beta = Linear::new(store, &format!("{name}/beta"), d, d, true, rng);
        store.get_mut(gamma.w).scale_assign(0.1);
        store.get_mut(beta.w).scale_assign(0.1);
        store.set(gamma.b.expect("bias"), Tensor::full(1, d, 1.0));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, c: Var) -> Var {
        let gm = self.gamma.forward(g, c);
        let bt = self.beta.forward(g, c);
        if g.shape(c).0 == 1 && g.shape(x).0 != 1 {
            let y = g.mul_row(x, gm);
            g.add_row(y, bt)
        } else {
            let y = g.mul(x, gm);
            g.add(y, bt)
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.gamma.ids();
        v.extend(self.beta.ids());
        v
    }
}

/// `LN(Z₁ + MLP(Z₁))` with `Z₁ = LN(x + φ_c(x, x))`.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub attn: CrossAttention,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: CrossAttention::new(store, &format!("{name}/attn"), d, heads, rng)?,
            mlp: Mlp::new(store, &format!("{name}/mlp"), d, d, d, true, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let a = self.attn.forward(g, x, x);
        let r = g.add(x, a);
        let z1 = g.layer_norm(r, LN_EPS);
        let m = self.mlp.forward(g, z1);
        let r2 = g.add(z1, m);
        g.layer_norm(r2, LN_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.extend(self.mlp.ids());
        v
    }
}

/// Single-head `LN(Q̃ − η·MLP(softmax(Q̃K̃ᵀ/√d)Ṽ))` on layer-normalised inputs.
#[derive(Debug, Clone)]
pub struct GradientCrossAttention {
    pub mlp: Mlp,
    pub eta: ParamId,
    pub d: usize,
}

impl GradientCrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}/mlp"), d, d, d, true, rng),
            eta: store.add(format!("{name}/eta"), Tensor::scalar(ETA_INIT)),
            d,
        }
    }

    /// `H`, before the MLP and step.
    pub fn attend(&self, g: &mut Graph<'_>, q_tilde: Var, kv: Var) -> Var {
        let k = g.layer_norm(kv, LN_EPS);
        let s = g.matmul_t(q_tilde, k);
        let s = g.scale(s, 1.0 / (self.d as f64).sqrt());
        let a = g.softmax_rows(s);
        g.matmul(a, k)
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var, kv: Var) -> Var {
        let qt = g.layer_norm(q, LN_EPS);
        let h = self.attend(g, qt, kv);
        let m = self.mlp.forward(g, h);
        let eta = g.param(self.eta);
        let step = g.scale_by(m, eta);
        let y = g.sub(qt, step);
        g.layer_norm(y, LN_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.mlp.ids();
        v.push(self.eta);
        v
    }
}
