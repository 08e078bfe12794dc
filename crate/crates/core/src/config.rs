//! Run configuration shared by training, evaluation and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NsParams;
use crate::error::{MofsError, Result};
use crate::fno::FnoConfig;
use crate::losses::LossWeights;
use crate::memory::{DEFAULT_ALPHA_QUAL, DEFAULT_CAPACITY, DEFAULT_TAU, DEFAULT_TOP_K};
use crate::pretrain::PretrainConfig;
use crate::text::DEFAULT_D_BERT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_vision: bool,
    pub no_text: bool,
    pub no_memory: bool,
    pub no_pretrain: bool,
}

impl Ablations {
    pub const FULL: Self = Self { no_vision: false, no_text: false, no_memory: false, no_pretrain: false };

    /// Column order of the ablation table.
    pub fn table() -> [(&'static str, Self); 5] {
        [
            ("Full", Self::FULL),
            ("w/o pretrain", Self { no_pretrain: true, ..Self::FULL }),
            ("w/o text", Self { no_text: true, ..Self::FULL }),
            ("w/o memory", Self { no_memory: true, ..Self::FULL }),
            ("w/o vision", Self { no_vision: true, ..Self::FULL }),
        ]
    }

    /// Parses `no_vision,no_text` style lists; `full` or empty means none.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut a = Self::FULL;
        for flag in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match flag.replace('-', "_").as_str() {
                "full" => {}
                "no_vision" => a.no_vision = true,
                "no_text" => a.no_text = true,
                "no_memory" => a.no_memory = true,
                "no_pretrain" => a.no_pretrain = true,
                other => return Err(MofsError::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_pretrain, "pretrain"),
            (self.no_text, "text"),
            (self.no_memory, "memory"),
            (self.no_vision, "vision"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "Full".into()
        } else {
            format!("w/o {}", parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grid: usize,
    pub samples_per_operator: usize,
    pub d: usize,
    pub blocks: usize,
    pub modes: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub d_bert: usize,
    pub rho: f64,
    pub alpha_freq: f64,
    pub tau: f64,
    pub alpha_qual: f64,
    pub top_k: usize,
    pub memory_capacity: usize,
    pub tau_c: f64,
    pub weights: LossWeights,
    pub j: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub baseline_epochs: usize,
    pub seed: u64,
    pub runs: usize,
    pub ablations: Ablations,
    pub ns: NsParams,
    pub strict_vision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            samples_per_operator: 10,
            d: 32,
            blocks: 4,
            modes: 8,
            heads: 4,
            prompt_len: 4,
            d_bert: DEFAULT_D_BERT,
            rho: 0.5,
            alpha_freq: 0.5,
            tau: DEFAULT_TAU,
            alpha_qual: DEFAULT_ALPHA_QUAL,
            top_k: DEFAULT_TOP_K,
            memory_capacity: DEFAULT_CAPACITY,
            tau_c: 0.07,
            weights: LossWeights::default(),
            j: 4,
            batch_size: 4,
            pretrain_epochs: 10,
            stage1_epochs: 20,
            stage2_epochs: 10,
            lr: 1e-3,
            pretrain_lr: 1e-3,
            baseline_epochs: 60,
            seed: 0,
            runs: 3,
            ablations: Ablations::FULL,
            ns: NsParams::default(),
            strict_vision: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MofsError::Config(m));
        if self.grid < 4 {
            return bad(format!("grid {} is below 4", self.grid));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.blocks == 0 || self.modes == 0 || 2 * self.modes > self.grid {
            return bad(format!("need blocks ≥ 1 and 1 ≤ modes ≤ grid/2, got {} and {}", self.blocks, self.modes));
        }
        if self.j == 0 {
            return bad("J must be at least 1".into());
        }
        if self.samples_per_operator <= self.j {
            return bad(format!("{} samples leave no queries after J = {}", self.samples_per_operator, self.j));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho {} outside (0,1)", self.rho));
        }
        for (name, v) in [("tau", self.tau), ("tau_c", self.tau_c), ("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("alpha_freq", self.alpha_freq), ("alpha_qual", self.alpha_qual)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        let w = self.weights;
        if [w.lambda1, w.lambda2, w.lambda3, w.lambda4].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be nonnegative".into());
        }
        if self.top_k == 0 || self.memory_capacity == 0 || self.batch_size == 0 || self.runs == 0 || self.d_bert == 0 {
            return bad("top_k, memory_capacity, batch_size, runs and d_bert must be positive".into());
        }
        Ok(())
    }

    pub fn fno(&self) -> FnoConfig {
        FnoConfig { d: self.d, blocks: self.blocks, m1: self.modes, m2: self.modes }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            fno: self.fno(),
            rho: self.rho,
            alpha_freq: self.alpha_freq,
            eps: crate::losses::EPS,
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            seed: self.seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"d": 8, "heads": 2}"#).unwrap();
        assert_eq!(partial.d, 8);
        assert_eq!(partial.grid, 16);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"dd": 8}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for c in [
            TrainConfig { j: 0, ..Default::default() },
            TrainConfig { d: 30, heads: 4, ..Default::default() },
            TrainConfig { modes: 9, grid: 16, ..Default::default() },
            TrainConfig { rho: 1.0, ..Default::default() },
            TrainConfig { samples_per_operator: 4, j: 4, ..Default::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn ablation_flags_parse() {
        let a = Ablations::parse("no_text, no-memory").unwrap();
        assert!(a.no_text && a.no_memory && !a.no_vision && !a.no_pretrain);
        assert_eq!(Ablations::parse("full").unwrap(), Ablations::FULL);
        assert!(Ablations::parse("no_wings").is_err());
        assert_eq!(a.label(), "w/o text+memory");
        assert_eq!(Ablations::table().len(), 5);
    }
}
