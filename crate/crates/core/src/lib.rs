//! Phase-field fracture material point, synthetic datasets, and two neural
//! stress surrogates (a plain regressor and an energy-based model whose
//! stress is the derivative of a learned free energy).

pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hash;
pub mod matpoint;
pub mod mlp;
pub mod models;
mod serde_util;
pub mod training;

pub use error::{Error, Result};
