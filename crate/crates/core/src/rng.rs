//! Deterministic random streams keyed by `(seed, name)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::matrix::Matrix;

/// Stream for a named tensor. Different names give decorrelated streams.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("std must be finite and nonnegative");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::new(rows, cols, data).expect("gaussian samples are finite")
}
