use log::warn;
use serde::{Deserialize, Serialize};

use super::{Field, Sample};
use crate::error::{MofsError, Result};

pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRole {
    InputA,
    OutputU,
}

/// Gaussian normaliser `x ↦ (x − mean)/std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub mean: f64,
    pub std: f64,
    pub field_role: FieldRole,
}

impl NormalizerStats {
    /// Population mean/std over every pixel of every field.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a Field>, role: FieldRole) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let fields: Vec<&Field> = fields.into_iter().collect();
        for f in &fields {
            n += f.len();
            sum += f.values().iter().sum::<f64>();
        }
        if n == 0 {
            return Err(MofsError::Config("cannot fit a normalizer on an empty dataset".into()));
        }
        let mean = sum / n as f64;
        let var = fields
            .iter()
            .flat_map(|f| f.values().iter())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let mut std = var.sqrt();
        if std < MIN_STD {
            warn!("constant {role:?} field (std {std:e}); clamping std to {MIN_STD:e}");
            std = MIN_STD;
        }
        Ok(Self { mean, std, field_role: role })
    }

    pub fn encode_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn decode_value(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn encode(&self, f: &Field) -> Field {
        f.map(|x| self.encode_value(x))
    }

    pub fn decode(&self, f: &Field) -> Field {
        f.map(|z| self.decode_value(z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub a: NormalizerStats,
    pub u: NormalizerStats,
}

impl Normalizers {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        Ok(Self {
            a: NormalizerStats::fit(samples.iter().map(|s| &s.a), FieldRole::InputA)?,
            u: NormalizerStats::fit(samples.iter().map(|s| &s.u), FieldRole::OutputU)?,
        })
    }

    pub fn encode(&self, s: &Sample) -> Sample {
        Sample { a: self.a.encode(&s.a), u: self.u.encode(&s.u) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_normalizes_to_zero_with_clamped_std() {
        let f = Field::filled(4, 4, 3.0);
        let s = NormalizerStats::fit([&f], FieldRole::InputA).unwrap();
        assert_eq!(s.std, MIN_STD);
        assert!(s.encode(&f).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_valued_pixels_give_unit_moments() {
        let f = Field::from_fn(4, 4, |i, j| if (i + j) % 2 == 0 { 0.0 } else { 2.0 }).unwrap();
        let s = NormalizerStats::fit([&f], FieldRole::OutputU).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-15);
        assert!((s.std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn encode_decode_round_trip() {
        let f = Field::from_fn(8, 8, |i, j| (i as f64 * 0.3).sin() * 40.0 + j as f64).unwrap();
        let s = NormalizerStats::fit([&f], FieldRole::InputA).unwrap();
        let back = s.decode(&s.encode(&f));
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }
}
