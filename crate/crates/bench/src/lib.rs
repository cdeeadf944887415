//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repcount::autodiff::Tensor;
use repcount::{CostMatrix, ModelConfig, QueryModel};

/// Desk model with its sequence length overridden.
pub fn desk_model(seq_len: usize) -> QueryModel {
    let cfg = ModelConfig {
        seq_len,
        ..ModelConfig::desk()
    };
    QueryModel::new(cfg, 0).expect("desk config is valid")
}

pub fn random_features(t: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(t, c, data).expect("shape")
}

/// Square cost matrix with entries uniform in `[-1, 1]`.
pub fn random_costs(n: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    CostMatrix::new(n, n, data).expect("shape")
}
