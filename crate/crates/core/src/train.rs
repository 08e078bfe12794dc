//! Two-stage few-shot training over episodes of prompts and queries.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{OperatorDataset, Sample};
use crate::error::{MofsError, Result};
use crate::fusion::VisionSource;
use crate::losses::{
    consistency_parts, diversity_loss, relative_l2, stage2_loss, ConsistencyViews, Curriculum, LossWeights,
};
use crate::memory::quality_from_loss;
use crate::model::{ModelConfig, MofsModel};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::Tensor;
use crate::text::{sample_descriptions, TextEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> usize {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Queries and demonstrations drawn from one operator.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePart {
    pub dataset: usize,
    pub queries: Vec<usize>,
    pub demos: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub parts: Vec<EpisodePart>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.queries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Logged loss terms of one update; `c_*` are already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub epoch: usize,
    pub pred: f64,
    pub c_au: f64,
    pub c_ue: f64,
    pub c_ahat: f64,
    pub diversity: f64,
    pub total: f64,
    pub lr: f64,
}

/// Datasets with their normalised samples cached.
pub struct TrainSet<'a> {
    pub datasets: &'a [OperatorDataset],
    pub normalized: Vec<Vec<Sample>>,
}

impl<'a> TrainSet<'a> {
    pub fn new(datasets: &'a [OperatorDataset]) -> Result<Self> {
        if datasets.is_empty() {
            return Err(MofsError::Config("training needs at least one operator".into()));
        }
        let normalized = datasets.iter().map(|d| d.samples.iter().map(|s| d.normalizers.encode(s)).collect()).collect();
        Ok(Self { datasets, normalized })
    }
}

/// Registers a trained context per dataset, with one description per sample.
pub fn build_model(
    cfg: &TrainConfig,
    datasets: &[OperatorDataset],
    pretrained: Option<&Checkpoint>,
    text: &dyn TextEncoder,
) -> Result<MofsModel> {
    cfg.validate()?;
    let vision = VisionSource { weights: None, strict: cfg.strict_vision };
    let mut model = MofsModel::new(ModelConfig::from(cfg), &vision)?;
    if let Some(ck) = pretrained.filter(|_| !cfg.ablations.no_pretrain) {
        let n = model.load_encoder(ck)?;
        debug!("loaded {n} pretrained encoder tensors");
    }
    for ds in datasets {
        if ds.dims() != (cfg.grid, cfg.grid) {
            return Err(MofsError::Shape(format!("{} is {:?}, config grid is {}", ds.name, ds.dims(), cfg.grid)));
        }
        model.add_context(ds.operator_id, &ds.name, &sample_descriptions(&ds.name, &ds.samples), text)?;
    }
    Ok(model)
}

/// Operators are paired so every batch mixes two labels; an odd one out joins the last pair.
pub fn plan_episodes(sizes: &[usize], batch_size: usize, j: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Episode>> {
    let mut ops: Vec<usize> = (0..sizes.len()).collect();
    ops.shuffle(rng);
    let mut groups: Vec<Vec<usize>> = ops.chunks(2).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().expect("nonempty");
        groups.last_mut().expect("nonempty").extend(last);
    }
    let mut episodes = Vec::new();
    for group in groups {
        let per_op = if sizes.len() == 1 { batch_size } else { batch_size.div_ceil(group.len()).max(2) };
        let chunks: Vec<Vec<Vec<usize>>> = group
            .iter()
            .map(|&k| {
                let mut idx: Vec<usize> = (0..sizes[k]).collect();
                idx.shuffle(rng);
                idx.chunks(per_op).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let rounds = chunks.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..rounds {
            let mut parts = Vec::new();
            for (&k, ch) in group.iter().zip(&chunks) {
                let Some(queries) = ch.get(r) else { continue };
                let mut pool: Vec<usize> = (0..sizes[k]).filter(|i| !queries.contains(i)).collect();
                if pool.is_empty() {
                    return Err(MofsError::NoDemonstrations);
                }
                pool.shuffle(rng);
                pool.truncate(j);
                parts.push(EpisodePart { dataset: k, queries: queries.clone(), demos: pool });
            }
            episodes.push(Episode { parts });
        }
    }
    Ok(episodes)
}

/// Values produced by one forward pass over an episode.
pub struct EpisodeLoss {
    pub total: Var,
    pub record: StepRecord,
    pub per_query: Vec<f64>,
    /// Memory entries to add once the update is applied.
    pub inserts: Vec<(Vec<f64>, Vec<f64>, f64, usize)>,
}

/// Builds the stage loss for `ep` on `g`.
pub fn episode_loss(
    model: &MofsModel,
    g: &mut Graph<'_>,
    set: &TrainSet<'_>,
    ep: &Episode,
    stage: Stage,
    weights: &LossWeights,
    curriculum: Curriculum,
) -> Result<EpisodeLoss> {
    let ab = model.cfg.ablations;
    let mut preds = Vec::new();
    let mut per_query = Vec::new();
    let mut inserts = Vec::new();
    let (mut za, mut zu, mut e_rows, mut zhat, mut keys, mut labels) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for part in &ep.parts {
        let ds = &set.datasets[part.dataset];
        let norm = &set.normalized[part.dataset];
        let ctx = model.context(ds.operator_id)?;
        let demos: Vec<Sample> = part.demos.iter().map(|&i| norm[i].clone()).collect();
        let f_hat_a = model.encode_prompts(g, &demos, ctx)?;
        let text = if stage == Stage::Two && weights.lambda2 != 0.0 && !ab.no_text {
            Some(model.text_rows(g, ctx)?)
        } else {
            None
        };
        for &i in &part.queries {
            let q = model.encode_query(g, &norm[i].a)?;
            let key = g.value(q.pooled).data().to_vec();
            let uv = g.constant(norm[i].u.to_tensor());
            let eu = model.embed(g, uv)?;
            let fu = model.fuse(g, &eu, &model.gate_u);
            let value = g.mean_rows(fu);
            let value = g.value(value).data().to_vec();
            let pooled = q.pooled;
            let pred = model.predict(g, f_hat_a, q, ctx, &ds.normalizers.u, Some(&key))?;
            let target = g.constant(ds.samples[i].u.to_tensor());
            let l = relative_l2(g, pred.physical, target);
            let lv = g.scalar(l);
            if !lv.is_finite() {
                return Err(MofsError::NonFinite(format!("prediction loss for {} sample {i}", ds.name)));
            }
            per_query.push(lv);
            preds.push(l);
            inserts.push((key, value, quality_from_loss(lv), ds.operator_id));
            if stage == Stage::Two {
                za.push(g.mean_rows(pred.query.emb.latent));
                zu.push(g.mean_rows(eu.latent));
                zhat.push(pred.z_u);
                keys.push(pooled);
                labels.push(ds.operator_id);
                if let Some(rows) = text {
                    let n = g.shape(rows).0;
                    e_rows.push(g.slice_rows(rows, i % n, i % n + 1));
                }
            }
        }
    }
    if preds.is_empty() {
        return Err(MofsError::Config("episode has no queries".into()));
    }
    let pred = g.mean_of(&preds);
    let mut record = StepRecord { pred: g.scalar(pred), ..Default::default() };
    let total = match stage {
        Stage::One => pred,
        Stage::Two => {
            let mut w = *weights;
            if ab.no_text {
                w.lambda2 = 0.0;
            }
            if ab.no_memory {
                w.lambda3 = 0.0;
                w.lambda4 = 0.0;
            }
            let views = ConsistencyViews {
                z_a: g.concat_rows(&za),
                z_u: g.concat_rows(&zu),
                e_text: if e_rows.is_empty() { g.concat_rows(&zu) } else { g.concat_rows(&e_rows) },
                z_hat_u: g.concat_rows(&zhat),
            };
            let parts = consistency_parts(g, views, &labels, &w, curriculum);
            let [c_au, c_ue, c_ahat] = parts.map(|t| t.map_or(0.0, |v| g.scalar(v)));
            (record.c_au, record.c_ue, record.c_ahat) = (c_au, c_ue, c_ahat);
            let zero = g.constant(Tensor::scalar(0.0));
            let consis = parts.iter().flatten().fold(zero, |acc, &v| g.add(acc, v));
            let div = if w.lambda4 == 0.0 {
                g.constant(Tensor::scalar(0.0))
            } else {
                let fresh = g.concat_rows(&keys);
                let stored: Vec<f64> = model.buffer.entries().flat_map(|e| e.key.iter().copied()).collect();
                let all = if stored.is_empty() {
                    fresh
                } else {
                    let c = g.constant(Tensor::new(model.buffer.len(), model.d(), stored));
                    g.concat_rows(&[fresh, c])
                };
                diversity_loss(g, all, w.lambda4)
            };
            record.diversity = g.scalar(div);
            stage2_loss(g, pred, consis, div)
        }
    };
    record.total = g.scalar(total);
    if !record.total.is_finite() {
        return Err(MofsError::NonFinite(format!("stage {} loss: {record:?}", stage.number())));
    }
    record.stage = stage.number();
    Ok(EpisodeLoss { total, record, per_query, inserts })
}

fn episode_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    rng.set_stream(((stage.number() as u64) << 32) | epoch as u64);
    rng
}

/// Forward and backward on one episode, then an update and memory writes.
pub fn train_step(
    model: &mut MofsModel,
    opt: &mut Adam,
    set: &TrainSet<'_>,
    ep: &Episode,
    stage: Stage,
    weights: &LossWeights,
    curriculum: Curriculum,
    lr: f64,
) -> Result<StepRecord> {
    let (grads, mut record, inserts): (Gradients, StepRecord, _) = {
        let mut g = Graph::with_params(&model.store);
        let out = episode_loss(model, &mut g, set, ep, stage, weights, curriculum)?;
        (g.backward(out.total), out.record, out.inserts)
    };
    opt.step(&mut model.store, &grads, lr);
    if !model.cfg.ablations.no_memory {
        for (key, value, quality, op) in inserts {
            model.buffer.insert(key, value, quality, op)?;
        }
    }
    record.lr = lr;
    Ok(record)
}

/// Runs every epoch of `stage`, applying its freezing policy first.
pub fn train_stage(model: &mut MofsModel, set: &TrainSet<'_>, cfg: &TrainConfig, stage: Stage) -> Result<Vec<StepRecord>> {
    let epochs = match stage {
        Stage::One => {
            model.freeze_for_stage1();
            cfg.stage1_epochs
        }
        Stage::Two => {
            model.unfreeze_all();
            cfg.stage2_epochs
        }
    };
    let sizes: Vec<usize> = set.datasets.iter().map(OperatorDataset::len).collect();
    let per_epoch = plan_episodes(&sizes, cfg.batch_size, cfg.j, &mut episode_rng(cfg.seed, stage, 0))?.len();
    let total_steps = epochs * per_epoch;
    let mut opt = Adam::default();
    let mut trace = Vec::with_capacity(total_steps);
    for epoch in 0..epochs {
        let curriculum = Curriculum::at(epoch as f64, epochs as f64, cfg.tau_c);
        let episodes = plan_episodes(&sizes, cfg.batch_size, cfg.j, &mut episode_rng(cfg.seed, stage, epoch))?;
        for ep in &episodes {
            let lr = cosine_lr(cfg.lr, trace.len(), total_steps);
            let mut rec = train_step(model, &mut opt, set, ep, stage, &cfg.weights, curriculum, lr)?;
            rec.step = trace.len();
            rec.epoch = epoch;
            trace.push(rec);
        }
        if let Some(last) = trace.last() {
            debug!("stage {} epoch {epoch}: total {:.4} pred {:.4}", stage.number(), last.total, last.pred);
        }
    }
    if let Some(last) = trace.last() {
        info!("stage {} finished after {} steps: L_pred {:.4}", stage.number(), trace.len(), last.pred);
    }
    Ok(trace)
}

pub fn write_trace_csv(trace: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,stage,epoch,L_pred,L_c_au,L_c_ue,L_c_ahat,L_div,total,lr")?;
    for r in trace {
        writeln!(
            f,
            "{},{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.6e}",
            r.step, r.stage, r.epoch, r.pred, r.c_au, r.c_ue, r.c_ahat, r.diversity, r.total, r.lr
        )?;
    }
    Ok(())
}
