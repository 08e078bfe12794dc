//! Multi-operator few-shot learning of PDE solution operators.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fno;
pub mod fusion;
pub mod losses;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod plots;
pub mod pretrain;
pub mod spectral;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{MofsError, Result};
