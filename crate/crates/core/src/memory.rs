//! FIFO key-value memory with quality-weighted top-k retrieval.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{MofsError, Result};
use crate::nn::init_normal;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 256;
pub const DEFAULT_TOP_K: usize = 4;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA_QUAL: f64 = 1.0;
pub const SELF_MATCH_COSINE: f64 = 0.9999;

/// `e^{−loss}`.
pub fn quality_from_loss(loss: f64) -> f64 {
    (-loss).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub quality: f64,
    pub operator_id: usize,
    pub insert_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub capacity: usize,
    pub d: usize,
    entries: VecDeque<MemoryEntry>,
    next_seq: u64,
}

/// Selected entries and their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub z_a: Vec<f64>,
    pub z_u: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

impl MemoryBuffer {
    pub fn new(capacity: usize, d: usize) -> Self {
        Self { capacity: capacity.max(1), d, entries: VecDeque::new(), next_seq: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn insert(&mut self, key: Vec<f64>, value: Vec<f64>, quality: f64, operator_id: usize) -> Result<()> {
        if key.len() != self.d || value.len() != self.d {
            return Err(MofsError::Shape(format!(
                "memory entries have width {}, got key {} value {}",
                self.d,
                key.len(),
                value.len()
            )));
        }
        if !key.iter().chain(&value).all(|v| v.is_finite()) {
            return Err(MofsError::NonFinite("memory entry".into()));
        }
        if !(quality > 0.0 && quality <= 1.0) {
            return Err(MofsError::Config(format!("memory quality must lie in (0,1], got {quality}")));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(MemoryEntry { key, value, quality, operator_id, insert_seq: self.next_seq });
        self.next_seq += 1;
        Ok(())
    }

    /// Indices of the top-`k` keys by `⟨proj, key⟩`, skipping near-copies
    /// of `exclude`. Ties keep insertion order.
    pub fn select(&self, proj: &[f64], k: usize, exclude: Option<&[f64]>) -> Vec<usize> {
        let mut cand: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclude.is_none_or(|x| cosine(&e.key, x) <= SELF_MATCH_COSINE))
            .map(|(i, e)| (i, dot(proj, &e.key)))
            .collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(k);
        cand.into_iter().map(|(i, _)| i).collect()
    }

    /// Retrieval on plain vectors; `None` when nothing is selectable.
    pub fn retrieve(&self, proj: &[f64], k: usize, tau: f64, alpha_qual: f64, exclude: Option<&[f64]>) -> Option<Retrieval> {
        let indices = self.select(proj, k, exclude);
        if indices.is_empty() {
            return None;
        }
        let logits: Vec<f64> = indices
            .iter()
            .map(|&i| dot(proj, &self.entries[i].key) / tau + alpha_qual * self.entries[i].quality)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        let weights: Vec<f64> = ex.iter().map(|e| e / z).collect();
        let mut z_a = vec![0.0; self.d];
        let mut z_u = vec![0.0; self.d];
        for (&i, &w) in indices.iter().zip(&weights) {
            for c in 0..self.d {
                z_a[c] += w * self.entries[i].key[c];
                z_u[c] += w * self.entries[i].value[c];
            }
        }
        Some(Retrieval { indices, weights, z_a, z_u })
    }

    pub fn write_to(&self, ck: &mut Checkpoint) {
        let n = self.entries.len();
        let d = self.d;
        let rows = |f: &dyn Fn(&MemoryEntry) -> Vec<f64>, cols: usize| {
            Tensor::new(n, cols, self.entries.iter().flat_map(f).collect())
        };
        ck.insert("memory/buffer/keys", rows(&|e| e.key.clone(), d));
        ck.insert("memory/buffer/values", rows(&|e| e.value.clone(), d));
        ck.insert("memory/buffer/quality", rows(&|e| vec![e.quality], 1));
        ck.insert("memory/buffer/operator_id", rows(&|e| vec![e.operator_id as f64], 1));
        ck.manifest["memory"] = serde_json::json!({ "capacity": self.capacity, "d": d, "len": n });
    }

    /// Inverse of [`MemoryBuffer::write_to`]. Keys and values pass through f32.
    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.manifest["memory"];
        let field = |k: &str| {
            meta[k].as_u64().map(|v| v as usize).ok_or_else(|| MofsError::Config(format!("checkpoint memory lacks {k}")))
        };
        let (capacity, d, n) = (field("capacity")?, field("d")?, field("len")?);
        let get = |name: &str, cols: usize| -> Result<&Tensor> {
            let t = ck.tensors.get(name).ok_or_else(|| MofsError::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != (n, cols) && n > 0 {
                return Err(MofsError::Shape(format!("{name} is {:?}, expected ({n}, {cols})", t.shape())));
            }
            Ok(t)
        };
        let mut buf = Self::new(capacity, d);
        if n == 0 {
            return Ok(buf);
        }
        let (keys, values) = (get("memory/buffer/keys", d)?, get("memory/buffer/values", d)?);
        let (quality, ids) = (get("memory/buffer/quality", 1)?, get("memory/buffer/operator_id", 1)?);
        for i in 0..n {
            let q = quality.get(i, 0).clamp(f64::MIN_POSITIVE, 1.0);
            buf.insert(keys.row_slice(i).to_vec(), values.row_slice(i).to_vec(), q, ids.get(i, 0) as usize)?;
        }
        Ok(buf)
    }
}

/// Retrieval hyperparameters with the learnable `W_q′` and merge gate `W_m`.
#[derive(Debug, Clone)]
pub struct MemoryModule {
    pub wq: ParamId,
    pub wm: ParamId,
    pub k: usize,
    pub tau: f64,
    pub alpha_qual: f64,
}

/// Graph-side retrieval result.
#[derive(Debug, Clone)]
pub struct RetrievedVars {
    pub z_a: Var,
    pub z_u: Var,
    pub selection: Retrieval,
}

impl MemoryModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let eye = Tensor::from_fn(d, d, |i, j| (i == j) as u8 as f64);
        let noise = init_normal(d, d, d, rng).map(|v| 0.1 * v);
        Self {
            wq: store.add(format!("{name}/wq"), eye.zip_map(&noise, |a, b| a + b)),
            wm: store.add(format!("{name}/wm"), init_normal(2 * d, 1, 2 * d, rng)),
            k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            alpha_qual: DEFAULT_ALPHA_QUAL,
        }
    }

    /// `f_q·W_q′` for a `1×d` pooled query.
    pub fn project(&self, g: &mut Graph<'_>, f_q: Var) -> Var {
        let w = g.param(self.wq);
        g.matmul(f_q, w)
    }

    /// Differentiable in `f_q` and `W_q′`; memory contents are constants.
    pub fn retrieve(
        &self,
        g: &mut Graph<'_>,
        f_q: Var,
        buffer: &MemoryBuffer,
        exclude: Option<&[f64]>,
    ) -> Result<RetrievedVars> {
        let proj = self.project(g, f_q);
        let pv = g.value(proj).data().to_vec();
        let sel = buffer.retrieve(&pv, self.k, self.tau, self.alpha_qual, exclude).ok_or(MofsError::NoMemory)?;
        let d = buffer.d;
        let n = sel.indices.len();
        let entries: Vec<&MemoryEntry> = buffer.entries.iter().collect();
        let keys = Tensor::from_fn(n, d, |r, c| entries[sel.indices[r]].key[c]);
        let vals = Tensor::from_fn(n, d, |r, c| entries[sel.indices[r]].value[c]);
        let qual = Tensor::from_fn(1, n, |_, c| self.alpha_qual * entries[sel.indices[c]].quality);
        let kv = g.constant(keys);
        let vv = g.constant(vals);
        let qv = g.constant(qual);
        let sims = g.matmul_t(proj, kv);
        let s = g.scale(sims, 1.0 / self.tau);
        let logits = g.add(s, qv);
        let w = g.softmax_rows(logits);
        Ok(RetrievedVars { z_a: g.matmul(w, kv), z_u: g.matmul(w, vv), selection: sel })
    }

    /// `f̂ + σ(W_m·[f̂, ẑ_a])·ẑ_a` per token.
    pub fn merge(&self, g: &mut Graph<'_>, f_hat: Var, z_a: Var) -> Var {
        let n = g.shape(f_hat).0;
        let zb = g.broadcast_rows(z_a, n);
        let cat = g.concat_cols(&[f_hat, zb]);
        let wm = g.param(self.wm);
        let s = g.matmul(cat, wm);
        let gate = g.sigmoid(s);
        let add = g.mul_col(zb, gate);
        g.add(f_hat, add)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wm]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize, i: usize, s: f64) -> Vec<f64> {
        (0..d).map(|j| if j == i { s } else { 0.0 }).collect()
    }

    #[test]
    fn fifo_eviction_and_quality() {
        let mut b = MemoryBuffer::new(2, 2);
        for i in 0..3 {
            b.insert(vec![i as f64, 0.0], vec![0.0, 0.0], quality_from_loss(0.0), i).unwrap();
        }
        let ids: Vec<usize> = b.entries().map(|e| e.operator_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(quality_from_loss(0.0), 1.0);
        assert!((quality_from_loss(0.5) - 0.6065).abs() < 1e-4);
        assert!(b.insert(vec![f64::NAN, 0.0], vec![0.0, 0.0], 1.0, 0).is_err());
        assert!(b.insert(vec![0.0, 0.0], vec![0.0, 0.0], 0.0, 0).is_err());
    }

    #[test]
    fn hand_set_similarities() {
        let mut b = MemoryBuffer::new(8, 3);
        b.insert(unit(3, 0, 1.0), unit(3, 0, 1.0), 1.0, 0).unwrap();
        b.insert(unit(3, 1, 0.0), unit(3, 1, 1.0), 1.0, 1).unwrap();
        b.insert(unit(3, 0, -1.0), unit(3, 2, 1.0), 1.0, 2).unwrap();
        let r = b.retrieve(&unit(3, 0, 1.0), 2, 1.0, 0.0, None).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        assert!((r.weights[0] - 0.7311).abs() < 1e-4);
        assert!((r.weights[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn uniform_when_everything_ties() {
        let mut b = MemoryBuffer::new(8, 2);
        for i in 0..5 {
            b.insert(vec![1.0, 1.0], vec![i as f64, 0.0], 0.5, 0).unwrap();
        }
        let r = b.retrieve(&[0.3, -0.3], 10, 0.1, 1.0, None).unwrap();
        assert!(r.weights.iter().all(|w| (w - 0.2).abs() < 1e-12));
        assert!((r.z_u[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn self_match_is_skipped() {
        let mut b = MemoryBuffer::new(8, 2);
        b.insert(vec![1.0, 0.0], vec![0.0, 0.0], 1.0, 0).unwrap();
        b.insert(vec![0.0, 1.0], vec![0.0, 0.0], 1.0, 0).unwrap();
        let r = b.retrieve(&[1.0, 0.0], 4, 0.1, 0.0, Some(&[2.0, 0.0])).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!(MemoryBuffer::new(4, 2).retrieve(&[1.0, 0.0], 4, 0.1, 0.0, None).is_none());
    }

    fn brute_force(keys: &[Vec<f64>], qual: &[f64], q: &[f64], k: usize, tau: f64, alpha: f64) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = keys.iter().enumerate().map(|(i, key)| (i, dot(q, key))).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top = &all[..k.min(all.len())];
        let z: f64 = top.iter().map(|(i, s)| (s / tau + alpha * qual[*i]).exp()).sum();
        top.iter().map(|(i, s)| (*i, (s / tau + alpha * qual[*i]).exp() / z)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn matches_full_sort_oracle(seed in any::<u64>(), n in 1usize..12, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let mut b = MemoryBuffer::new(64, d);
            let mut keys = Vec::new();
            let mut qual = Vec::new();
            for i in 0..n {
                let key: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q = rng.random_range(0.05..1.0);
                b.insert(key.clone(), vec![i as f64; d], q, i).unwrap();
                keys.push(key);
                qual.push(q);
            }
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = b.retrieve(&q, k, 0.5, 1.0, None).unwrap();
            let oracle = brute_force(&keys, &qual, &q, k, 0.5, 1.0);
            prop_assert_eq!(r.indices.clone(), oracle.iter().map(|o| o.0).collect::<Vec<_>>());
            for (w, o) in r.weights.iter().zip(&oracle) {
                prop_assert!((w - o.1).abs() < 1e-6);
            }
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn quality_raises_weight(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let build = |q0: f64| {
                let mut b = MemoryBuffer::new(8, 3);
                for (i, k) in keys.iter().enumerate() {
                    b.insert(k.clone(), k.clone(), if i == 0 { q0 } else { 0.5 }, i).unwrap();
                }
                b.retrieve(&q, 8, 0.3, 1.0, None).unwrap()
            };
            let (lo, hi) = (build(0.3), build(0.9));
            let pos = lo.indices.iter().position(|&i| i == 0).unwrap();
            prop_assert!(hi.weights[pos] > lo.weights[pos]);
        }

        #[test]
        fn buffer_is_a_fold_of_its_log(seed in any::<u64>(), n in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let log: Vec<(Vec<f64>, f64)> = (0..n).map(|_| (vec![rng.random(), rng.random()], rng.random_range(0.1..1.0))).collect();
            let fold = || log.iter().fold(MemoryBuffer::new(5, 2), |mut b, (k, q)| {
                b.insert(k.clone(), k.clone(), *q, 0).unwrap();
                b
            });
            prop_assert_eq!(fold(), fold());
            prop_assert!(fold().len() == n.min(5));
        }
    }

    #[test]
    fn merge_cases() {
        let mut store = ParamStore::new();
        let m = MemoryModule::new(&mut store, "memory", 2, &mut ChaCha8Rng::seed_from_u64(0));
        let f = Tensor::new(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let run = |store: &ParamStore, z: Tensor| {
            let mut g = Graph::with_params(store);
            let fv = g.constant(f.clone());
            let zv = g.constant(z);
            let o = m.merge(&mut g, fv, zv);
            g.value(o).clone()
        };
        assert_eq!(run(&store, Tensor::zeros(1, 2)), f);
        store.set(m.wm, Tensor::new(4, 1, vec![0.0, 0.0, -1e6, 0.0]));
        assert_eq!(run(&store, Tensor::row(vec![1.0, 0.0])), f);
        store.set(m.wm, Tensor::new(4, 1, vec![1.0, 0.0, 0.0, 1.0]));
        let z = [0.3, 0.7];
        let out = run(&store, Tensor::row(z.to_vec()));
        for i in 0..2 {
            let s = f.get(i, 0) + z[1];
            let gate = 1.0 / (1.0 + (-s).exp());
            for c in 0..2 {
                assert!((out.get(i, c) - (f.get(i, c) + gate * z[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn retrieval_gradients_and_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let m = MemoryModule::new(&mut store, "memory", 4, &mut rng);
        let mut buf = MemoryBuffer::new(16, 4);
        for i in 0..6 {
            let k: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            buf.insert(k.clone(), k.iter().map(|v| v * 2.0).collect(), 0.2 + 0.1 * i as f64, i).unwrap();
        }
        let fq = Tensor::randn(1, 4, 1.0, &mut rng);
        let fh = Tensor::randn(3, 4, 1.0, &mut rng);
        let err = GradCheck::default().inputs(Some(&store), &[fq.clone(), fh.clone()], |g, v| {
            let r = m.retrieve(g, v[0], &buf, None).unwrap();
            let merged = m.merge(g, v[1], r.z_a);
            let zu = g.broadcast_rows(r.z_u, 3);
            g.mul(merged, zu)
        });
        assert!(err < 1e-3, "{err}");
        let (err, name) = GradCheck::default().params(&mut store, &m.ids(), |g| {
            let q = g.constant(fq.clone());
            let h = g.constant(fh.clone());
            let r = m.retrieve(g, q, &buf, None).unwrap();
            let merged = m.merge(g, h, r.z_a);
            let s = g.square(merged);
            g.sum_all(s)
        });
        assert!(err < 1e-3, "{name}: {err}");

        let mut ck = Checkpoint::new(serde_json::json!({}));
        buf.write_to(&mut ck);
        let back = MemoryBuffer::read_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.len(), buf.len());
        for (a, b) in back.entries().zip(buf.entries()) {
            assert_eq!(a.operator_id, b.operator_id);
            assert!((a.quality - b.quality).abs() < 1e-6);
            assert!(a.key.iter().zip(&b.key).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}
