//! Leave-one-operator-out few-shot evaluation, baselines and ablation columns.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, BaselineConfig, BaselineKind, MeanPredictor, PoolSample};
use crate::checkpoint::Checkpoint;
use crate::config::{Ablations, TrainConfig};
use crate::data::{Normalizers, OperatorDataset, Sample};
use crate::error::{MofsError, Result};
use crate::losses::relative_l2_error;
use crate::model::MofsModel;
use crate::nn::Grid;
use crate::pretrain::{PretrainRecord, Pretrainer};
use crate::text::{sample_descriptions, TextEncoder};
use crate::train::{build_model, train_stage, Stage, StepRecord, TrainSet};

pub const BASELINE_NOTE: &str = "baselines train on the training operators plus the J test demonstrations";

/// Demonstration and query indices within the test operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub demos: Vec<usize>,
    pub queries: Vec<usize>,
}

impl FewShotSplit {
    pub fn draw(n: usize, j: usize, seed: u64, operator_id: usize) -> Result<Self> {
        if j == 0 || j >= n {
            return Err(MofsError::Config(format!("J = {j} leaves no queries among {n} samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde70_5eed);
        rng.set_stream(operator_id as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let (d, q) = idx.split_at(j);
        let (mut demos, mut queries) = (d.to_vec(), q.to_vec());
        demos.sort_unstable();
        queries.sort_unstable();
        Ok(Self { demos, queries })
    }

    pub fn demo_samples<'a>(&self, ds: &'a OperatorDataset) -> Vec<&'a Sample> {
        self.demos.iter().map(|&i| &ds.samples[i]).collect()
    }

    /// Statistics seen at test time: fitted on the demonstrations only.
    pub fn normalizers(&self, ds: &OperatorDataset) -> Result<Normalizers> {
        let demos: Vec<Sample> = self.demo_samples(ds).into_iter().cloned().collect();
        Normalizers::fit(&demos)
    }
}

/// Everything produced while training on one rotation.
pub struct TrainedRotation {
    pub model: MofsModel,
    pub pretrain: Option<Checkpoint>,
    pub pretrain_trace: Vec<PretrainRecord>,
    pub stage1_model: Checkpoint,
    pub stage1: Vec<StepRecord>,
    pub stage2: Vec<StepRecord>,
}

pub fn pretrain_on(train: &[OperatorDataset], cfg: &TrainConfig) -> Result<(Checkpoint, Vec<PretrainRecord>)> {
    let mut p = Pretrainer::new(cfg.pretrain(), Grid::new(cfg.grid, cfg.grid))?;
    let trace = p.train(train)?;
    Ok((p.checkpoint(), trace))
}

/// Pretrain (unless ablated), stage 1 and stage 2 on `train`.
pub fn train_mofs(
    train: &[OperatorDataset],
    cfg: &TrainConfig,
    pretrained: Option<&Checkpoint>,
    text: &dyn TextEncoder,
) -> Result<TrainedRotation> {
    let (pretrain, pretrain_trace) = match (cfg.ablations.no_pretrain, pretrained) {
        (true, _) => (None, Vec::new()),
        (false, Some(ck)) => (Some(ck.clone()), Vec::new()),
        (false, None) => {
            let (ck, trace) = pretrain_on(train, cfg)?;
            (Some(ck), trace)
        }
    };
    let mut model = build_model(cfg, train, pretrain.as_ref(), text)?;
    let set = TrainSet::new(train)?;
    let stage1 = train_stage(&mut model, &set, cfg, Stage::One)?;
    let stage1_model = model.to_checkpoint(serde_json::json!({ "stage": 1 }));
    let stage2 = train_stage(&mut model, &set, cfg, Stage::Two)?;
    Ok(TrainedRotation { model, pretrain, pretrain_trace, stage1_model, stage1, stage2 })
}

/// Per-query relative L2 of a trained model on an unseen operator.
pub fn evaluate_few_shot(
    model: &mut MofsModel,
    test: &OperatorDataset,
    split: &FewShotSplit,
    text: &dyn TextEncoder,
) -> Result<Vec<f64>> {
    let norm = split.normalizers(test)?;
    let demos: Vec<Sample> = split.demo_samples(test).into_iter().cloned().collect();
    if !model.contexts.contains_key(&test.operator_id) {
        model.add_unseen_context(test.operator_id, &test.name, &sample_descriptions(&test.name, &demos), text)?;
    }
    let prompts: Vec<Sample> = demos.iter().map(|s| norm.encode(s)).collect();
    split
        .queries
        .iter()
        .map(|&i| {
            let s = &test.samples[i];
            let pred = model.predict_field(&prompts, &norm.a.encode(&s.a), test.operator_id, &norm.u)?;
            Ok(relative_l2_error(&pred, &s.u))
        })
        .collect()
}

/// Training pool for baselines: every training sample plus the test demonstrations.
pub fn baseline_pool(train: &[OperatorDataset], test: &OperatorDataset, split: &FewShotSplit) -> Result<Vec<PoolSample>> {
    let mut pool: Vec<PoolSample> = train
        .iter()
        .flat_map(|d| d.samples.iter().map(|s| PoolSample { normalized: d.normalizers.encode(s), physical_u: s.u.clone() }))
        .collect();
    let norm = split.normalizers(test)?;
    pool.extend(
        split.demo_samples(test).into_iter().map(|s| PoolSample { normalized: norm.encode(s), physical_u: s.u.clone() }),
    );
    Ok(pool)
}

pub fn evaluate_baseline(
    kind: BaselineKind,
    train: &[OperatorDataset],
    test: &OperatorDataset,
    split: &FewShotSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let pool = baseline_pool(train, test, split)?;
    let queries = split.queries.iter().map(|&i| &test.samples[i]);
    if kind == BaselineKind::Mean {
        let m = MeanPredictor::fit(&pool)?;
        return Ok(queries.map(|s| relative_l2_error(&m.mean, &s.u)).collect());
    }
    let bcfg = BaselineConfig { d: cfg.d, modes: cfg.modes, blocks: cfg.blocks, epochs: cfg.baseline_epochs, lr: cfg.lr, seed };
    let mut b = Baseline::new(kind, Grid::new(cfg.grid, cfg.grid), &bcfg)?;
    b.fit(&pool, &bcfg)?;
    let norm = split.normalizers(test)?;
    queries.map(|s| Ok(relative_l2_error(&b.predict(&norm.a.encode(&s.a), &norm.u)?, &s.u))).collect()
}

/// One report column: a labelled ablation setting or a baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Mofs { label: String, ablations: Ablations },
    Baseline(BaselineKind),
}

impl Column {
    pub fn label(&self) -> String {
        match self {
            Column::Mofs { label, .. } => label.clone(),
            Column::Baseline(k) => k.name().to_string(),
        }
    }

    pub fn mofs() -> Self {
        Column::Mofs { label: "MOFS".into(), ablations: Ablations::FULL }
    }

    /// The comparison layout: MOFS and every baseline.
    pub fn comparison() -> Vec<Self> {
        let mut v = vec![Self::mofs(), Column::Baseline(BaselineKind::Mean)];
        v.extend(BaselineKind::LEARNED.map(Column::Baseline));
        v
    }

    /// The ablation layout.
    pub fn ablation_table() -> Vec<Self> {
        Ablations::table().into_iter().map(|(l, a)| Column::Mofs { label: l.to_string(), ablations: a }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub operator: String,
    /// Per column, one mean relative L2 per run.
    pub runs: Vec<Vec<f64>>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, v.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub runs: usize,
    pub j: usize,
}

impl EvalReport {
    pub fn cell(&self, operator: &str, column: &str) -> Option<(f64, f64)> {
        let c = self.columns.iter().position(|x| x == column)?;
        let r = self.rows.iter().find(|r| r.operator == operator)?;
        Some(mean_std(&r.runs[c]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("operator");
        for c in &self.columns {
            write!(s, ",{c} mean,{c} std").expect("string write");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.operator);
            for runs in &r.runs {
                let (m, sd) = mean_std(runs);
                write!(s, ",{m:.6e},{sd:.6e}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("operator".to_string()).chain(self.columns.clone()).collect()];
        for r in &self.rows {
            let mut line = vec![r.operator.clone()];
            line.extend(r.runs.iter().map(|runs| {
                let (m, sd) = mean_std(runs);
                format!("{m:.4} ± {sd:.4}")
            }));
            cells.push(line);
        }
        let widths: Vec<usize> =
            (0..cells[0].len()).map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("relative L2, mean ± std over {} run(s), J = {}; {BASELINE_NOTE}\n", self.runs, self.j);
        for (k, line) in cells.iter().enumerate() {
            let padded: Vec<String> = line.iter().zip(&widths).map(|(t, w)| format!("{t:<w$}")).collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, csv: impl AsRef<Path>, table: impl AsRef<Path>) -> Result<()> {
        std::fs::write(csv, self.to_csv())?;
        std::fs::write(table, self.to_table())?;
        Ok(())
    }
}

/// Every operator except the held-out one.
pub fn rotation_train(datasets: &[OperatorDataset], test: usize) -> Vec<OperatorDataset> {
    datasets.iter().enumerate().filter(|&(k, _)| k != test).map(|(_, d)| d.clone()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Rotates the held-out operator over `leave_out` (all operators when empty);
/// run `r` uses seed `cfg.seed + r`.
pub fn evaluate_leave_one_out(
    datasets: &[OperatorDataset],
    cfg: &TrainConfig,
    columns: &[Column],
    leave_out: &[String],
    text: &dyn TextEncoder,
) -> Result<EvalReport> {
    cfg.validate()?;
    if datasets.len() < 2 {
        return Err(MofsError::Config("leave-one-out needs at least two operators".into()));
    }
    let mut ids: Vec<usize> = datasets.iter().map(|d| d.operator_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != datasets.len() {
        return Err(MofsError::Config("operator ids must be distinct".into()));
    }
    let tests: Vec<usize> = if leave_out.is_empty() {
        (0..datasets.len()).collect()
    } else {
        leave_out
            .iter()
            .map(|name| {
                datasets.iter().position(|d| &d.name == name).ok_or_else(|| MofsError::UnknownOperator(name.clone()))
            })
            .collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for &t in &tests {
        let test = &datasets[t];
        let train = rotation_train(datasets, t);
        let mut runs = vec![Vec::with_capacity(cfg.runs); columns.len()];
        for r in 0..cfg.runs {
            let run_cfg = TrainConfig { seed: cfg.seed + r as u64, ..cfg.clone() };
            let split = FewShotSplit::draw(test.len(), cfg.j, run_cfg.seed, test.operator_id)?;
            let mut shared_pretrain: Option<Checkpoint> = None;
            for (c, col) in columns.iter().enumerate() {
                let errs = match col {
                    Column::Mofs { ablations, .. } => {
                        let ccfg = TrainConfig { ablations: *ablations, ..run_cfg.clone() };
                        if !ablations.no_pretrain && shared_pretrain.is_none() {
                            shared_pretrain = Some(pretrain_on(&train, &ccfg)?.0);
                        }
                        let mut rot = train_mofs(&train, &ccfg, shared_pretrain.as_ref(), text)?;
                        evaluate_few_shot(&mut rot.model, test, &split, text)?
                    }
                    Column::Baseline(kind) => evaluate_baseline(*kind, &train, test, &split, &run_cfg, run_cfg.seed)?,
                };
                let m = mean(&errs);
                info!("{} run {r}, {}: relative L2 {m:.4}", test.name, col.label());
                runs[c].push(m);
            }
        }
        rows.push(ReportRow { operator: test.name.clone(), runs });
    }
    Ok(EvalReport { columns: columns.iter().map(Column::label).collect(), rows, runs: cfg.runs, j: cfg.j })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_darcy;
    use crate::text::HashEncoder;

    fn tiny() -> TrainConfig {
        TrainConfig {
            grid: 8,
            samples_per_operator: 6,
            d: 4,
            blocks: 2,
            modes: 2,
            heads: 2,
            prompt_len: 2,
            d_bert: 8,
            j: 2,
            top_k: 2,
            memory_capacity: 32,
            pretrain_epochs: 1,
            stage1_epochs: 1,
            stage2_epochs: 1,
            baseline_epochs: 1,
            runs: 1,
            ..Default::default()
        }
    }

    fn toy(cfg: &TrainConfig) -> Vec<OperatorDataset> {
        [1.0, 10.0]
            .iter()
            .enumerate()
            .map(|(k, &b)| generate_darcy(b, cfg.samples_per_operator, cfg.grid, cfg.grid, k as u64).unwrap().with_operator_id(k))
            .collect()
    }

    fn text(cfg: &TrainConfig) -> HashEncoder {
        HashEncoder { d_bert: cfg.d_bert, max_tokens: 64 }
    }

    #[test]
    fn split_is_disjoint_seeded_and_complete() {
        let s = FewShotSplit::draw(10, 4, 0, 3).unwrap();
        assert_eq!(s.demos.len(), 4);
        assert_eq!(s.queries.len(), 6);
        let mut all: Vec<usize> = s.demos.iter().chain(&s.queries).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, FewShotSplit::draw(10, 4, 0, 3).unwrap());
        assert!(FewShotSplit::draw(4, 4, 0, 0).is_err());
    }

    #[test]
    fn std_is_zero_for_one_run_and_sample_std_otherwise() {
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_operators_give_a_two_row_reproducible_report() {
        let cfg = tiny();
        let data = toy(&cfg);
        let cols = vec![Column::mofs(), Column::Baseline(BaselineKind::Mean)];
        let a = evaluate_leave_one_out(&data, &cfg, &cols, &[], &text(&cfg)).unwrap();
        let b = evaluate_leave_one_out(&data, &cfg, &cols, &[], &text(&cfg)).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("operator,MOFS mean,MOFS std,Mean mean,Mean std\n"));
        assert!(a.rows.iter().all(|r| r.runs.iter().all(|c| c.len() == 1 && c[0].is_finite())));
        assert!(a.to_table().contains(BASELINE_NOTE));
        let one = evaluate_leave_one_out(&data, &cfg, &cols, &[data[1].name.clone()], &text(&cfg)).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert!(evaluate_leave_one_out(&data, &cfg, &cols, &["nope".into()], &text(&cfg)).is_err());
    }

    #[test]
    fn every_ablation_column_runs() {
        let cfg = tiny();
        let data = toy(&cfg);
        let cols = Column::ablation_table();
        let r = evaluate_leave_one_out(&data, &cfg, &cols, &[data[0].name.clone()], &text(&cfg)).unwrap();
        assert_eq!(r.columns, ["Full", "w/o pretrain", "w/o text", "w/o memory", "w/o vision"]);
        assert!(r.rows[0].runs.iter().all(|c| c[0].is_finite()));
    }

    #[test]
    fn poisoned_test_queries_do_not_change_training() {
        let cfg = tiny();
        let data = toy(&cfg);
        let split = FewShotSplit::draw(data[1].len(), cfg.j, cfg.seed, data[1].operator_id).unwrap();
        let digest_for = |all: &[OperatorDataset]| {
            let train = rotation_train(all, 1);
            let rot = train_mofs(&train, &cfg, None, &text(&cfg)).unwrap();
            let pool = baseline_pool(&train, &all[1], &split).unwrap();
            let pool_bytes: Vec<f64> =
                pool.iter().flat_map(|p| p.normalized.a.values().iter().chain(p.normalized.u.values()).copied()).collect();
            (rot.model.to_checkpoint(serde_json::Value::Null).digest(), pool_bytes)
        };
        let clean = digest_for(&data);
        let mut poisoned = data.clone();
        for &q in &split.queries {
            poisoned[1].samples[q].u = poisoned[1].samples[q].u.map(|v| v * 1e3 + 7.0);
        }
        assert_eq!(digest_for(&poisoned), clean);
    }
}
