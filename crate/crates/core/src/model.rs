//! The few-shot operator network: encoders, fusion, memory, contexts and decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Ablations, TrainConfig};
use crate::data::{Field, NormalizerStats, Sample};
use crate::error::{MofsError, Result};
use crate::fno::{FnoConfig, FnoEncoder, PositionalEncoding};
use crate::fusion::{CrossAttention, Film, GatedFusion, GradientCrossAttention, SelfAttentionBlock, VisionEncoder, VisionSource};
use crate::memory::{MemoryBuffer, MemoryModule, Retrieval};
use crate::nn::{init_normal, Grid, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::TextEncoder;

const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: (usize, usize),
    pub fno: FnoConfig,
    pub heads: usize,
    pub prompt_len: usize,
    pub d_bert: usize,
    pub top_k: usize,
    pub tau: f64,
    pub alpha_qual: f64,
    pub memory_capacity: usize,
    pub ablations: Ablations,
    pub seed: u64,
}

impl From<&TrainConfig> for ModelConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            grid: (c.grid, c.grid),
            fno: c.fno(),
            heads: c.heads,
            prompt_len: c.prompt_len,
            d_bert: c.d_bert,
            top_k: c.top_k,
            tau: c.tau,
            alpha_qual: c.alpha_qual,
            memory_capacity: c.memory_capacity,
            ablations: c.ablations,
            seed: c.seed,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.fno.d
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid.0, self.grid.1)
    }
}

/// Per-operator text states, soft prompt and ID embedding.
#[derive(Debug, Clone)]
pub struct OperatorContext {
    pub id: usize,
    pub name: String,
    /// Pooled text-encoder states, one row per description.
    pub bert: Tensor,
    pub prompt: Option<ParamId>,
    pub id_emb: ParamId,
    /// Unseen operators get a mean-initialised, frozen context.
    pub unseen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextMeta {
    id: usize,
    name: String,
    unseen: bool,
}

/// Encoder latent, `+P` map and optional vision map for one field.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    pub latent: Var,
    pub f_pos: Var,
    pub vision: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct SupportEncoding {
    pub f_a: Var,
    pub f_u: Var,
    pub f_hat_a: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct QueryEncoding {
    pub emb: Embedded,
    pub tokens: Var,
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Normalised prediction, `(H·W)×1`.
    pub normalized: Var,
    /// De-normalised prediction, `(H·W)×1`.
    pub physical: Var,
    pub query: QueryEncoding,
    pub z_a: Var,
    pub z_u: Var,
    pub retrieval: Option<Retrieval>,
}

#[derive(Debug)]
pub struct MofsModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: FnoEncoder,
    pub pos: PositionalEncoding,
    pub vision: VisionEncoder,
    pub gate_a: GatedFusion,
    pub gate_u: GatedFusion,
    pub gate_q: GatedFusion,
    pub text_proj: ParamId,
    pub text_attn: CrossAttention,
    pub text_film: Film,
    pub self_attn: SelfAttentionBlock,
    pub support_attn: GradientCrossAttention,
    pub memory: MemoryModule,
    pub buffer: MemoryBuffer,
    pub query_attn: CrossAttention,
    pub query_film: Film,
    pub dec_gamma: Linear,
    pub dec_beta: Linear,
    pub dec_attn: GradientCrossAttention,
    pub dec_mlp: Mlp,
    pub contexts: BTreeMap<usize, OperatorContext>,
}

fn column(f: &Field) -> Tensor {
    f.to_tensor()
}

impl MofsModel {
    /// Every submodule is built regardless of ablation flags, so parameter
    /// sets match across ablations for a given seed.
    pub fn new(cfg: ModelConfig, vision: &VisionSource) -> Result<Self> {
        let grid = cfg.grid();
        if 2 * cfg.fno.m1 > grid.h || 2 * cfg.fno.m2 > grid.w {
            return Err(MofsError::Config(format!("{} modes do not fit a {:?} grid", cfg.fno.m1, cfg.grid)));
        }
        let d = cfg.d();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let encoder = FnoEncoder::new(s, "encoder", 1, cfg.fno, grid, &mut rng)?;
        let pos = PositionalEncoding::new(s, "fusion/pos", d, grid, &mut rng);
        let vision = VisionEncoder::new(s, "fusion/vision", d, vision, &mut rng)?;
        let gate_a = GatedFusion::new(s, "fusion/gate_a", d, &mut rng);
        let gate_u = GatedFusion::new(s, "fusion/gate_u", d, &mut rng);
        let gate_q = GatedFusion::new(s, "fusion/gate_q", d, &mut rng);
        let text_proj = s.add("text/w_p", init_normal(cfg.d_bert, d, cfg.d_bert, &mut rng));
        let text_attn = CrossAttention::new(s, "fusion/text_attn", d, cfg.heads, &mut rng)?;
        let text_film = Film::new(s, "fusion/text_film", d, &mut rng);
        let self_attn = SelfAttentionBlock::new(s, "fusion/self_attn", d, cfg.heads, &mut rng)?;
        let support_attn = GradientCrossAttention::new(s, "fusion/support_attn", d, &mut rng);
        let mut memory = MemoryModule::new(s, "memory", d, &mut rng);
        memory.k = cfg.top_k;
        memory.tau = cfg.tau;
        memory.alpha_qual = cfg.alpha_qual;
        let query_attn = CrossAttention::new(s, "fusion/query_attn", d, cfg.heads, &mut rng)?;
        let query_film = Film::new(s, "fusion/query_film", d, &mut rng);
        let dec_gamma = Linear::new(s, "decoder/gamma", d, d, true, &mut rng);
        let dec_beta = Linear::new(s, "decoder/beta", d, d, true, &mut rng);
        let dec_attn = GradientCrossAttention::new(s, "decoder/attn", d, &mut rng);
        let dec_mlp = Mlp::new(s, "decoder/mlp", d, d, 1, true, &mut rng);
        let buffer = MemoryBuffer::new(cfg.memory_capacity, d);
        Ok(Self {
            cfg,
            store,
            encoder,
            pos,
            vision,
            gate_a,
            gate_u,
            gate_q,
            text_proj,
            text_attn,
            text_film,
            self_attn,
            support_attn,
            memory,
            buffer,
            query_attn,
            query_film,
            dec_gamma,
            dec_beta,
            dec_attn,
            dec_mlp,
            contexts: BTreeMap::new(),
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d()
    }

    pub fn grid(&self) -> Grid {
        self.cfg.grid()
    }

    fn context_rng(&self, id: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xc0_47e7);
        rng.set_stream(id as u64);
        rng
    }

    fn insert_context(&mut self, id: usize, name: &str, bert: Tensor, prompt: Option<Tensor>, id_emb: Tensor, unseen: bool) {
        let prompt = prompt.map(|p| self.store.add(format!("context/{id}/prompt"), p));
        let id_emb = self.store.add(format!("context/{id}/id_emb"), id_emb);
        if unseen {
            for pid in prompt.iter().chain(std::iter::once(&id_emb)) {
                self.store.set_trainable(*pid, false);
            }
        }
        self.contexts.insert(id, OperatorContext { id, name: name.to_string(), bert, prompt, id_emb, unseen });
    }

    fn check_new_context(&self, id: usize, texts: &[String], encoder: &dyn TextEncoder) -> Result<Tensor> {
        if self.contexts.contains_key(&id) {
            return Err(MofsError::Config(format!("operator {id} already has a context")));
        }
        if encoder.d_bert() != self.cfg.d_bert {
            return Err(MofsError::Shape(format!("text encoder width {} vs model {}", encoder.d_bert(), self.cfg.d_bert)));
        }
        if texts.is_empty() {
            return Ok(Tensor::zeros(0, self.cfg.d_bert));
        }
        encoder.pooled_batch(texts)
    }

    /// Context for a training operator with freshly initialised prompt and ID embedding.
    pub fn add_context(&mut self, id: usize, name: &str, texts: &[String], encoder: &dyn TextEncoder) -> Result<()> {
        let bert = self.check_new_context(id, texts, encoder)?;
        let d = self.d();
        let mut rng = self.context_rng(id);
        let prompt = (self.cfg.prompt_len > 0).then(|| Tensor::randn(self.cfg.prompt_len, d, CONTEXT_INIT_STD, &mut rng));
        let id_emb = Tensor::randn(1, d, CONTEXT_INIT_STD, &mut rng);
        self.insert_context(id, name, bert, prompt, id_emb, false);
        Ok(())
    }

    /// Context for an unseen operator: text from its demonstrations, prompt
    /// and ID embedding averaged over the trained contexts, all frozen.
    pub fn add_unseen_context(&mut self, id: usize, name: &str, texts: &[String], encoder: &dyn TextEncoder) -> Result<()> {
        let bert = self.check_new_context(id, texts, encoder)?;
        let d = self.d();
        let trained: Vec<&OperatorContext> = self.contexts.values().filter(|c| !c.unseen).collect();
        let mean_of = |ids: Vec<ParamId>, rows: usize| {
            let mut acc = Tensor::zeros(rows, d);
            for id in &ids {
                acc.add_assign(self.store.get(*id));
            }
            if !ids.is_empty() {
                acc.scale_assign(1.0 / ids.len() as f64);
            }
            acc
        };
        let prompt = (self.cfg.prompt_len > 0)
            .then(|| mean_of(trained.iter().filter_map(|c| c.prompt).collect(), self.cfg.prompt_len));
        let id_emb = mean_of(trained.iter().map(|c| c.id_emb).collect(), 1);
        self.insert_context(id, name, bert, prompt, id_emb, true);
        Ok(())
    }

    pub fn context(&self, id: usize) -> Result<&OperatorContext> {
        self.contexts.get(&id).ok_or_else(|| MofsError::UnknownOperator(format!("operator id {id}")))
    }

    /// Projected per-description embeddings `e⁽ᵏ⁾`, `n×d`.
    pub fn text_rows(&self, g: &mut Graph<'_>, ctx: &OperatorContext) -> Result<Var> {
        if ctx.bert.rows() == 0 {
            return Err(MofsError::MissingText(ctx.id));
        }
        let b = g.constant(ctx.bert.clone());
        let w = g.param(self.text_proj);
        Ok(g.matmul(b, w))
    }

    /// Operator-level `ē⁽ᵏ⁾`, `1×d`.
    pub fn text_embedding(&self, g: &mut Graph<'_>, ctx: &OperatorContext) -> Result<Var> {
        let rows = self.text_rows(g, ctx)?;
        Ok(g.mean_rows(rows))
    }

    pub fn embed(&self, g: &mut Graph<'_>, x: Var) -> Result<Embedded> {
        let grid = self.grid();
        let latent = self.encoder.forward(g, x, grid)?;
        let f_pos = self.pos.forward(g, latent, grid);
        let vision = (!self.cfg.ablations.no_vision).then(|| self.vision.forward(g, x, grid));
        Ok(Embedded { latent, f_pos, vision })
    }

    /// Gated fusion; without vision the gate is fixed at 1.
    pub fn fuse(&self, g: &mut Graph<'_>, e: &Embedded, gate: &GatedFusion) -> Var {
        match e.vision {
            Some(v) => gate.forward(g, e.f_pos, v),
            None => e.f_pos,
        }
    }

    pub fn encode_support(&self, g: &mut Graph<'_>, a: &Field, u: &Field, ctx: &OperatorContext) -> Result<SupportEncoding> {
        let av = g.constant(column(a));
        let uv = g.constant(column(u));
        let ea = self.embed(g, av)?;
        let eu = self.embed(g, uv)?;
        let f_a = self.fuse(g, &ea, &self.gate_a);
        let f_u = self.fuse(g, &eu, &self.gate_u);
        let f_a1 = if self.cfg.ablations.no_text {
            f_a
        } else {
            let e_bar = self.text_embedding(g, ctx)?;
            let fused = self.text_attn.forward(g, f_a, e_bar);
            self.text_film.forward(g, f_a, fused)
        };
        let f_a2 = self.self_attn.forward(g, f_a1);
        let f_hat_a = self.support_attn.forward(g, f_a2, f_u);
        Ok(SupportEncoding { f_a, f_u, f_hat_a })
    }

    /// Mean of the demonstrations' fused support maps.
    pub fn encode_prompts(&self, g: &mut Graph<'_>, prompts: &[Sample], ctx: &OperatorContext) -> Result<Var> {
        if prompts.is_empty() {
            return Err(MofsError::NoDemonstrations);
        }
        let maps = prompts
            .iter()
            .map(|p| self.encode_support(g, &p.a, &p.u, ctx).map(|s| s.f_hat_a))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.mean_of(&maps))
    }

    pub fn encode_query_var(&self, g: &mut Graph<'_>, a_q: Var) -> Result<QueryEncoding> {
        let emb = self.embed(g, a_q)?;
        let tokens = self.fuse(g, &emb, &self.gate_q);
        let pooled = g.mean_rows(tokens);
        Ok(QueryEncoding { emb, tokens, pooled })
    }

    pub fn encode_query(&self, g: &mut Graph<'_>, a_q: &Field) -> Result<QueryEncoding> {
        let v = g.constant(column(a_q));
        self.encode_query_var(g, v)
    }

    /// `(ẑ_a, ẑ_u)`, zeros when memory is off or yields nothing.
    pub fn retrieve(&self, g: &mut Graph<'_>, pooled: Var, exclude: Option<&[f64]>) -> Result<(Var, Var, Option<Retrieval>)> {
        if !self.cfg.ablations.no_memory {
            match self.memory.retrieve(g, pooled, &self.buffer, exclude) {
                Ok(r) => return Ok((r.z_a, r.z_u, Some(r.selection))),
                Err(MofsError::NoMemory) => {}
                Err(e) => return Err(e),
            }
        }
        let z = Tensor::zeros(1, self.d());
        Ok((g.constant(z.clone()), g.constant(z), None))
    }

    pub fn condition_query(&self, g: &mut Graph<'_>, f_q: Var, ctx: &OperatorContext, z_u: Var) -> Var {
        let e_o = g.param(ctx.id_emb);
        let f1 = g.add_row(f_q, e_o);
        let att = self.query_attn.forward(g, f1, z_u);
        let f2 = g.add(f1, att);
        self.query_film.forward(g, f2, z_u)
    }

    /// Normalised prediction for the `H·W` support positions; the soft
    /// prompt joins `β(f̂_q)` on the key/value side.
    pub fn decode(&self, g: &mut Graph<'_>, f_hat_a_prime: Var, f_hat_q: Var, ctx: &OperatorContext) -> Var {
        let q = self.dec_gamma.forward(g, f_hat_a_prime);
        let b = self.dec_beta.forward(g, f_hat_q);
        let kv = match ctx.prompt {
            Some(p) if self.cfg.prompt_len > 0 => {
                let pv = g.param(p);
                g.concat_rows(&[b, pv])
            }
            _ => b,
        };
        let o = self.dec_attn.forward(g, q, kv);
        self.dec_mlp.forward(g, o)
    }

    /// Query-side pipeline given the prompt summary `f̂_a`.
    pub fn predict(
        &self,
        g: &mut Graph<'_>,
        f_hat_a: Var,
        query: QueryEncoding,
        ctx: &OperatorContext,
        u_norm: &NormalizerStats,
        exclude: Option<&[f64]>,
    ) -> Result<Prediction> {
        let (z_a, z_u, retrieval) = self.retrieve(g, query.pooled, exclude)?;
        let f_hat_a_prime = self.memory.merge(g, f_hat_a, z_a);
        let f_hat_q = self.condition_query(g, query.tokens, ctx, z_u);
        let normalized = self.decode(g, f_hat_a_prime, f_hat_q, ctx);
        let scaled = g.scale(normalized, u_norm.std);
        let physical = g.shift(scaled, u_norm.mean);
        if !g.value(physical).all_finite() {
            return Err(MofsError::NonFinite(format!("prediction for operator {}", ctx.name)));
        }
        Ok(Prediction { normalized, physical, query, z_a, z_u, retrieval })
    }

    /// Fields in `prompts` and `a_q` are normalised; `u_norm` maps back to physical units.
    pub fn forward_few_shot(
        &self,
        g: &mut Graph<'_>,
        prompts: &[Sample],
        a_q: &Field,
        ctx_id: usize,
        u_norm: &NormalizerStats,
    ) -> Result<Prediction> {
        let ctx = self.context(ctx_id)?;
        let f_hat_a = self.encode_prompts(g, prompts, ctx)?;
        let q = self.encode_query(g, a_q)?;
        self.predict(g, f_hat_a, q, ctx, u_norm, None)
    }

    /// Value-only prediction in physical units.
    pub fn predict_field(&self, prompts: &[Sample], a_q: &Field, ctx_id: usize, u_norm: &NormalizerStats) -> Result<Field> {
        let mut g = Graph::with_params(&self.store);
        let p = self.forward_few_shot(&mut g, prompts, a_q, ctx_id, u_norm)?;
        let grid = self.grid();
        Field::from_tensor(g.value(p.physical), grid.h, grid.w)
    }

    /// Names of parameters belonging to unseen-operator contexts.
    fn is_unseen_param(&self, id: ParamId) -> bool {
        self.contexts.values().any(|c| c.unseen && (c.prompt == Some(id) || c.id_emb == id))
    }

    /// Stage-1 contract: lift and all but the last spectral block fixed.
    pub fn freeze_for_stage1(&mut self) {
        self.store.set_all_trainable(true);
        for id in self.encoder.frozen_ids() {
            self.store.set_trainable(id, false);
        }
        self.refreeze_unseen();
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_all_trainable(true);
        self.refreeze_unseen();
    }

    fn refreeze_unseen(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().filter(|&id| self.is_unseen_param(id)).collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    /// Copies `encoder/*` from a pretraining checkpoint.
    pub fn load_encoder(&mut self, ck: &Checkpoint) -> Result<usize> {
        ck.load_into(&mut self.store, "encoder/")
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let contexts: Vec<ContextMeta> =
            self.contexts.values().map(|c| ContextMeta { id: c.id, name: c.name.clone(), unseen: c.unseen }).collect();
        let mut ck = Checkpoint::from_store(
            &self.store,
            serde_json::json!({
                "kind": "mofs",
                "model": self.cfg,
                "contexts": contexts,
                "extra": extra,
            }),
        );
        for c in self.contexts.values() {
            ck.insert(format!("context/{}/bert", c.id), c.bert.clone());
        }
        self.buffer.write_to(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, vision: &VisionSource) -> Result<Self> {
        if ck.manifest["kind"] != "mofs" {
            return Err(MofsError::Config("checkpoint does not hold a few-shot model".into()));
        }
        let cfg: ModelConfig = serde_json::from_value(ck.manifest["model"].clone())?;
        let metas: Vec<ContextMeta> = serde_json::from_value(ck.manifest["contexts"].clone())?;
        let mut m = Self::new(cfg, vision)?;
        let d = m.d();
        for meta in metas {
            let bert = ck
                .tensors
                .get(&format!("context/{}/bert", meta.id))
                .cloned()
                .ok_or_else(|| MofsError::Config(format!("checkpoint lacks text states for operator {}", meta.id)))?;
            let prompt = (m.cfg.prompt_len > 0).then(|| Tensor::zeros(m.cfg.prompt_len, d));
            m.insert_context(meta.id, &meta.name, bert, prompt, Tensor::zeros(1, d), meta.unseen);
        }
        ck.restore(&mut m.store)?;
        m.buffer = MemoryBuffer::read_from(ck)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use crate::data::generate_darcy;
    use crate::text::HashEncoder;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            grid: (8, 8),
            fno: FnoConfig { d: 4, blocks: 2, m1: 2, m2: 2 },
            heads: 2,
            prompt_len: 2,
            d_bert: 8,
            top_k: 2,
            tau: 0.5,
            alpha_qual: 1.0,
            memory_capacity: 16,
            ablations: Ablations::FULL,
            seed: 3,
        }
    }

    fn setup(cfg: ModelConfig) -> (MofsModel, Vec<Sample>, NormalizerStats) {
        let ds = generate_darcy(10.0, 5, 8, 8, 1).unwrap();
        let enc = HashEncoder { d_bert: 8, max_tokens: 64 };
        let mut m = MofsModel::new(cfg, &VisionSource::default()).unwrap();
        m.add_context(0, &ds.name, &crate::text::sample_descriptions(&ds.name, &ds.samples), &enc).unwrap();
        let norm: Vec<Sample> = ds.samples.iter().map(|s| ds.normalizers.encode(s)).collect();
        (m, norm, ds.normalizers.u.clone())
    }

    #[test]
    fn shapes_and_determinism() {
        let (m, s, un) = setup(tiny_cfg());
        let a = m.predict_field(&s[..3], &s[4].a, 0, &un).unwrap();
        let b = m.predict_field(&s[..3], &s[4].a, 0, &un).unwrap();
        assert_eq!(a.dims(), (8, 8));
        assert_eq!(a, b);
        assert!(matches!(m.predict_field(&[], &s[4].a, 0, &un), Err(MofsError::NoDemonstrations)));
        assert!(matches!(m.predict_field(&s[..1], &s[4].a, 9, &un), Err(MofsError::UnknownOperator(_))));
    }

    #[test]
    fn soft_prompt_reaches_the_prediction() {
        let (mut m, s, un) = setup(tiny_cfg());
        let before = m.predict_field(&s[..2], &s[4].a, 0, &un).unwrap();
        let p = m.context(0).unwrap().prompt.unwrap();
        m.store.get_mut(p).data_mut()[0] += 1.0;
        assert_ne!(m.predict_field(&s[..2], &s[4].a, 0, &un).unwrap(), before);
        let (m0, s0, un0) = setup(ModelConfig { prompt_len: 0, ..tiny_cfg() });
        assert_eq!(m0.predict_field(&s0[..2], &s0[4].a, 0, &un0).unwrap().dims(), (8, 8));
    }

    #[test]
    fn prompt_order_does_not_matter() {
        let (m, s, un) = setup(tiny_cfg());
        let a = m.predict_field(&[s[0].clone(), s[1].clone(), s[2].clone()], &s[4].a, 0, &un).unwrap();
        let b = m.predict_field(&[s[2].clone(), s[0].clone(), s[1].clone()], &s[4].a, 0, &un).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn pooled_query_is_token_mean() {
        let (m, s, _) = setup(tiny_cfg());
        let mut g = Graph::with_params(&m.store);
        let q = m.encode_query(&mut g, &s[0].a).unwrap();
        let t = g.value(q.tokens);
        let mean = t.mean_rows();
        for (x, y) in g.value(q.pooled).data().iter().zip(mean.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(t.shape(), (64, 4));
    }

    #[test]
    fn fixed_gate_and_zero_step_ignore_vision_and_u() {
        let (mut m, s, _) = setup(ModelConfig { ablations: Ablations { no_vision: true, ..Ablations::FULL }, ..tiny_cfg() });
        m.store.set(m.support_attn.eta, Tensor::scalar(0.0));
        let run = |m: &MofsModel, u: &Field| {
            let mut g = Graph::with_params(&m.store);
            let e = m.encode_support(&mut g, &s[0].a, u, m.context(0).unwrap()).unwrap();
            g.value(e.f_hat_a).clone()
        };
        let base = run(&m, &s[0].u);
        for id in m.vision.ids() {
            let t = m.store.get(id).map(|v| 3.0 * v + 1.0);
            m.store.set(id, t);
        }
        assert_eq!(run(&m, &s[1].u), base);
        m.cfg.ablations.no_vision = false;
        assert_ne!(run(&m, &s[0].u), base);
    }

    #[test]
    fn context_for_unseen_operator_is_mean_and_frozen() {
        let (mut m, s, _) = setup(tiny_cfg());
        let enc = HashEncoder { d_bert: 8, max_tokens: 64 };
        m.add_context(1, "other", &["a b c".to_string()], &enc).unwrap();
        m.add_unseen_context(7, "test", &["x y".to_string()], &enc).unwrap();
        let c0 = m.store.get(m.contexts[&0].id_emb).clone();
        let c1 = m.store.get(m.contexts[&1].id_emb).clone();
        let c7 = m.store.get(m.contexts[&7].id_emb).clone();
        for k in 0..4 {
            assert!((c7.data()[k] - 0.5 * (c0.data()[k] + c1.data()[k])).abs() < 1e-15);
        }
        m.unfreeze_all();
        assert!(!m.store.is_trainable(m.contexts[&7].id_emb));
        assert!(m.store.is_trainable(m.contexts[&0].id_emb));
        let _ = s;
    }

    #[test]
    fn missing_text_is_an_error_unless_ablated() {
        let (mut m, s, un) = setup(tiny_cfg());
        let enc = HashEncoder { d_bert: 8, max_tokens: 64 };
        m.add_context(2, "silent", &[], &enc).unwrap();
        assert!(matches!(m.predict_field(&s[..2], &s[3].a, 2, &un), Err(MofsError::MissingText(_))));
        m.cfg.ablations.no_text = true;
        assert!(m.predict_field(&s[..2], &s[3].a, 2, &un).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut m, s, un) = setup(tiny_cfg());
        m.buffer.insert(vec![0.1, 0.2, 0.3, 0.4], vec![0.0, 0.5, 0.0, 1.0], 0.9, 0).unwrap();
        let ck = m.to_checkpoint(serde_json::json!({"stage": 1}));
        let back = MofsModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &VisionSource::default()).unwrap();
        let a = m.predict_field(&s[..2], &s[3].a, 0, &un).unwrap();
        let b = back.predict_field(&s[..2], &s[3].a, 0, &un).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-5 * x.abs().max(1e-3), "{x} vs {y}");
        }
        assert_eq!(back.buffer.len(), 1);
    }

    #[test]
    fn full_pipeline_gradient_wrt_query() {
        let (mut m, s, un) = setup(tiny_cfg());
        m.buffer.insert(vec![0.1, -0.2, 0.3, 0.4], vec![0.0, 0.5, 0.0, 1.0], 0.9, 0).unwrap();
        m.buffer.insert(vec![-0.3, 0.2, 0.1, 0.0], vec![1.0, 0.5, 0.0, 0.0], 0.5, 0).unwrap();
        let ctx = m.context(0).unwrap().clone();
        let prompts = s[..2].to_vec();
        let err = GradCheck::default().inputs(Some(&m.store), &[s[3].a.to_tensor()], |g, v| {
            let f = m.encode_prompts(g, &prompts, &ctx).unwrap();
            let q = m.encode_query_var(g, v[0]).unwrap();
            let p = m.predict(g, f, q, &ctx, &un, None).unwrap();
            let sq = g.square(p.physical);
            g.sum_all(sq)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn every_ablation_runs() {
        for (_, a) in Ablations::table() {
            let (m, s, un) = setup(ModelConfig { ablations: a, ..tiny_cfg() });
            assert!(m.predict_field(&s[..2], &s[3].a, 0, &un).is_ok());
        }
        let (m0, _, _) = setup(tiny_cfg());
        let (m1, _, _) = setup(ModelConfig { ablations: Ablations { no_memory: true, ..Ablations::FULL }, ..tiny_cfg() });
        let names0: Vec<_> = m0.store.iter_sorted().collect();
        let names1: Vec<_> = m1.store.iter_sorted().collect();
        assert_eq!(names0, names1);
    }
}
