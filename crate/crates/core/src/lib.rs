//! SVD-based low-rank adapter initialization (LoRA, PiSSA, MiLoRA and the
//! asymmetric AILoRA policy), a small transformer trainer to exercise them,
//! and the diagnostics used to compare schemes.

pub mod adapter;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod factorization;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod store;
pub mod svd;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use store::TensorStore;
