//! Synthetic operator families and their on-disk format.

mod field;
pub mod darcy;
pub mod io;
pub mod navier_stokes;
pub mod normalizer;
pub mod random_field;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use darcy::generate_darcy;
pub use field::{Field, MIN_SIDE};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use navier_stokes::{generate_navier_stokes, NsParams};
pub use normalizer::{FieldRole, NormalizerStats, Normalizers};

use crate::error::{MofsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub a: Field,
    pub u: Field,
}

/// One operator family with its samples, normaliser and description.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    pub operator_id: usize,
    pub name: String,
    pub samples: Vec<Sample>,
    pub generator_params: BTreeMap<String, f64>,
    pub normalizers: Normalizers,
    pub description_text: String,
}

impl OperatorDataset {
    /// Validates shapes, fits normalisers and renders the description.
    pub fn build(
        name: String,
        operator_id: usize,
        samples: Vec<Sample>,
        generator_params: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let first = samples.first().ok_or_else(|| MofsError::Config(format!("{name}: no samples")))?;
        let dims = first.a.dims();
        for (k, s) in samples.iter().enumerate() {
            if s.a.dims() != dims || s.u.dims() != dims {
                return Err(MofsError::Shape(format!("{name}: sample {k} does not match {dims:?}")));
            }
        }
        let normalizers = Normalizers::fit(&samples)?;
        let description_text = crate::text::describe_samples(&name, &samples);
        Ok(Self { operator_id, name, samples, generator_params, normalizers, description_text })
    }

    pub fn with_operator_id(mut self, id: usize) -> Self {
        self.operator_id = id;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.samples[0].a.dims()
    }
}

pub const DARCY_BETAS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const NS_IC_SEEDS: [u64; 6] = [0, 1, 10, 100, 101, 102];

/// A single family in the operator suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Variant {
    Darcy { beta: f64 },
    NavierStokes { ic_seed: u64 },
}

impl Variant {
    pub fn name(&self) -> String {
        match *self {
            Variant::Darcy { beta } => darcy::darcy_name(beta),
            Variant::NavierStokes { ic_seed } => navier_stokes::ns_name(ic_seed),
        }
    }

    pub fn generate(&self, n: usize, size: usize, seed: u64, ns: NsParams) -> Result<OperatorDataset> {
        match *self {
            Variant::Darcy { beta } => generate_darcy(beta, n, size, size, seed),
            Variant::NavierStokes { ic_seed } => generate_navier_stokes(ic_seed, n, size, size, ns),
        }
    }
}

/// The eleven default variants, Darcy first, in operator-id order.
pub fn default_variants() -> Vec<Variant> {
    DARCY_BETAS
        .iter()
        .map(|&beta| Variant::Darcy { beta })
        .chain(NS_IC_SEEDS.iter().map(|&ic_seed| Variant::NavierStokes { ic_seed }))
        .collect()
}

/// Generates every variant and assigns ids by position.
pub fn generate_suite(variants: &[Variant], n: usize, size: usize, seed: u64, ns: NsParams) -> Result<Vec<OperatorDataset>> {
    variants
        .iter()
        .enumerate()
        .map(|(k, v)| Ok(v.generate(n, size, seed, ns)?.with_operator_id(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_has_eleven_named_variants() {
        let names: Vec<String> = default_variants().iter().map(Variant::name).collect();
        assert_eq!(names.len(), 11);
        assert_eq!(names[0], "DarcyFlow-0.01");
        assert_eq!(names[2], "DarcyFlow-1.0");
        assert_eq!(names[4], "DarcyFlow-100.0");
        assert_eq!(names[10], "NavierStokes-102");
    }

    #[test]
    fn generation_is_repeatable() {
        let a = generate_darcy(10.0, 2, 8, 8, 5).unwrap();
        let b = generate_darcy(10.0, 2, 8, 8, 5).unwrap();
        assert_eq!(a, b);
        let p = NsParams { t_final: 0.2, viscosity: 1e-3, n_steps: 4 };
        assert_eq!(generate_navier_stokes(1, 2, 8, 8, p).unwrap(), generate_navier_stokes(1, 2, 8, 8, p).unwrap());
    }

    #[test]
    fn neighbouring_seeds_do_not_share_samples() {
        let p = NsParams { t_final: 0.2, viscosity: 1e-3, n_steps: 4 };
        let a = generate_navier_stokes(100, 2, 8, 8, p).unwrap();
        let b = generate_navier_stokes(101, 2, 8, 8, p).unwrap();
        assert_ne!(a.samples[1].a, b.samples[0].a);
        assert_ne!(a.samples[0].a, b.samples[1].a);
    }
}
