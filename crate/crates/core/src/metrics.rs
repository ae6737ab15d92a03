//! Expert utilisation and gate-diversity statistics.

use serde::{Deserialize, Serialize};

use crate::numerics::sym_eigenvalues;
use crate::router::{RoutingDecision, RoutingMode, SimilarityMatrix};

/// Regulariser added to every singular value before normalising.
pub const SPECTRAL_EPS: f64 = 1e-8;

/// One row of the metrics log: a (step, layer) snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub layer: usize,
    pub mode: RoutingMode,
    pub balance_loss_on: bool,
    pub zero_token_count: usize,
    pub avg_cos_sim: f64,
    pub avg_angle: f64,
    pub spectral_entropy: f64,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub accuracy_estimate: f64,
}

/// Experts that no decision in the batch selected.
pub fn zero_token_count(decisions: &[RoutingDecision], n_experts: usize) -> usize {
    let mut used = vec![false; n_experts];
    for d in decisions {
        for &i in &d.selected {
            used[i] = true;
        }
    }
    used.iter().filter(|u| !**u).count()
}

fn mean_over_pairs(s: &SimilarityMatrix, f: impl Fn(f64) -> f64) -> f64 {
    let n = s.n();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += f(s.get(i, j));
        }
    }
    total * 2.0 / (n * (n - 1)) as f64
}

/// Mean of `|S_ij|` over unordered pairs.
pub fn avg_cosine_similarity(s: &SimilarityMatrix) -> f64 {
    mean_over_pairs(s, f64::abs)
}

/// Mean of `arccos(S_ij)` over unordered pairs, in radians.
pub fn avg_angle(s: &SimilarityMatrix) -> f64 {
    mean_over_pairs(s, |v| v.clamp(-1.0, 1.0).acos())
}

/// Natural-log entropy of the ε-regularised, normalised singular values of `S`.
pub fn spectral_entropy(s: &SimilarityMatrix) -> f64 {
    let eig = sym_eigenvalues(s.matrix()).expect("similarity matrices are symmetric");
    let sigma: Vec<f64> = eig.iter().map(|v| v.abs()).collect();
    let n = sigma.len() as f64;
    let denom = sigma.iter().sum::<f64>() + n * SPECTRAL_EPS;
    sigma
        .iter()
        .map(|&x| {
            let p = (x + SPECTRAL_EPS) / denom;
            -p * p.ln()
        })
        .sum()
}
