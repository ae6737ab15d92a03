//! Fixtures shared by the routing and training benchmarks.

use gatepro_core::{GatingWeights, Matrix, Rng};

/// Gate matrix with standard normal entries.
pub fn random_gates(n_experts: usize, dim: usize, seed: u64) -> GatingWeights {
    let mut rng = Rng::new(seed);
    let data = (0..n_experts * dim).map(|_| rng.next_gaussian()).collect();
    GatingWeights::new(Matrix::new(n_experts, dim, data).expect("shape matches data")).expect("gaussian rows are nonzero")
}

pub fn random_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.next_gaussian()).collect()
}
