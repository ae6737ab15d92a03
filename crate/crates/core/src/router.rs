//! Top-k gating and competitive gating between most-similar gate pairs.
//!
//! The competitive router compares every expert against the expert whose gate
//! row is most cosine-similar to its own. Whichever of the two has the lower
//! logit for the current token has a constant `lambda` subtracted from its
//! logit before top-k selection and mixture weighting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, dot, matvec_into, Matrix, Vector};

/// Router matrix, one row per expert. The gate bias is fixed at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights {
    w: Matrix,
}

impl GatingWeights {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.rows() < 2 {
            return Err(Error::contract("gating needs at least two experts"));
        }
        if let Some(r) = (0..w.rows()).find(|&r| w.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::contract(format!("gate row {r} is the zero vector")));
        }
        Ok(GatingWeights { w })
    }

    pub fn n_experts(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    /// Mutable access for optimizers. Zero rows are caught again by
    /// [`gate_similarity`].
    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }
}

/// Pairwise cosine similarity of gate rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    s: Matrix,
}

impl SimilarityMatrix {
    /// Wraps a matrix that must already be a valid cosine-similarity matrix.
    pub fn from_matrix(s: Matrix) -> Result<Self> {
        let n = s.rows();
        if n != s.cols() || n < 2 {
            return Err(Error::contract("similarity matrix must be square with N >= 2"));
        }
        if !s.is_symmetric(1e-12) {
            return Err(Error::contract("similarity matrix is not symmetric"));
        }
        for i in 0..n {
            if (s.get(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::contract(format!("diagonal entry {i} is not 1")));
            }
        }
        if s.data().iter().any(|v| v.abs() > 1.0 + 1e-12) {
            return Err(Error::contract("similarity entry outside [-1, 1]"));
        }
        Ok(SimilarityMatrix { s })
    }

    pub fn n(&self) -> usize {
        self.s.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.s
    }
}

/// For each expert, the index of its most similar other expert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterpartMap {
    j_star: Vec<usize>,
}

impl CounterpartMap {
    pub fn as_slice(&self) -> &[usize] {
        &self.j_star
    }

    pub fn counterpart(&self, i: usize) -> usize {
        self.j_star[i]
    }

    pub fn len(&self) -> usize {
        self.j_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.j_star.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Baseline,
    #[serde(rename = "gatepro")]
    GatePro,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Baseline => "baseline",
            RoutingMode::GatePro => "gatepro",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(RoutingMode::Baseline),
            "gatepro" => Ok(RoutingMode::GatePro),
            other => Err(Error::config(format!("unknown routing mode {other:?}"))),
        }
    }
}

/// When the similarity snapshot is rebuilt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityRefresh {
    /// Once per optimizer step, shared by every token in the step.
    #[default]
    PerStep,
    /// On every layer forward call.
    PerForward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateProConfig {
    pub lambda: f64,
    pub k: usize,
    pub similarity_refresh: SimilarityRefresh,
}

impl Default for GateProConfig {
    fn default() -> Self {
        GateProConfig {
            lambda: 1e-4,
            k: 6,
            similarity_refresh: SimilarityRefresh::PerStep,
        }
    }
}

impl GateProConfig {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.k == 0 || self.k > n_experts {
            return Err(Error::contract(format!(
                "top-k {} outside 1..={n_experts}",
                self.k
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!(
                "penalty must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Everything the router decided for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, ascending.
    pub selected: Vec<usize>,
    /// Mixture weights, dense length N, nonzero only at `selected`.
    pub weights: Vec<f64>,
    pub suppressed_logits: Vec<f64>,
    pub penalty_mask: Vec<bool>,
    pub raw_logits: Vec<f64>,
}

impl RoutingDecision {
    pub fn n_experts(&self) -> usize {
        self.raw_logits.len()
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

/// Similarity snapshot plus the counterpart map derived from it. Built once
/// and shared read-only by all routings that see the same gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityCache {
    pub similarity: SimilarityMatrix,
    pub counterparts: CounterpartMap,
}

impl SimilarityCache {
    pub fn build(g: &GatingWeights) -> Result<Self> {
        let similarity = gate_similarity(g)?;
        let counterparts = most_similar(&similarity);
        Ok(SimilarityCache {
            similarity,
            counterparts,
        })
    }
}

pub fn compute_logits(x: &[f64], g: &GatingWeights) -> Result<Vector> {
    numerics::matvec(&g.w, x)
}

/// Cosine similarity of every pair of gate rows. O(N² d).
pub fn gate_similarity(g: &GatingWeights) -> Result<SimilarityMatrix> {
    let n = g.n_experts();
    let d = g.dim();
    let mut unit = Matrix::zeros(n, d);
    for i in 0..n {
        let row = g.w.row(i);
        let norm = dot(row, row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::contract(format!(
                "gate row {i} has degenerate norm {norm}"
            )));
        }
        for (u, &w) in unit.row_mut(i).iter_mut().zip(row) {
            *u = w / norm;
        }
    }
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let c = dot(unit.row(i), unit.row(j));
            s.set(i, j, c);
            s.set(j, i, c);
        }
    }
    Ok(SimilarityMatrix { s })
}

/// `argmax_{j != i} S[i, j]`, lowest index on ties.
pub fn most_similar(s: &SimilarityMatrix) -> CounterpartMap {
    let n = s.n();
    let j_star = (0..n)
        .map(|i| {
            let mut best = if i == 0 { 1 } else { 0 };
            for j in best + 1..n {
                if j != i && s.get(i, j) > s.get(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    CounterpartMap { j_star }
}

/// Applies the competition penalty. Expert `i` loses (and is penalised) iff
/// its logit is strictly below its counterpart's; equality counts as a win.
pub fn compete(logits: &[f64], cmap: &CounterpartMap, lambda: f64) -> (Vec<f64>, Vec<bool>) {
    debug_assert_eq!(logits.len(), cmap.len());
    let mut suppressed = logits.to_vec();
    let mut mask = vec![false; logits.len()];
    for (i, &j) in cmap.j_star.iter().enumerate() {
        if logits[i] < logits[j] {
            suppressed[i] = logits[i] - lambda;
            mask[i] = true;
        }
    }
    (suppressed, mask)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("top-k {k} outside 1..={n}")));
    }
    Ok(())
}

fn check_dim(x: &[f64], g: &GatingWeights) -> Result<()> {
    if x.len() != g.dim() {
        return Err(Error::contract(format!(
            "token has dimension {}, gate expects {}",
            x.len(),
            g.dim()
        )));
    }
    Ok(())
}

/// Selection and weighting shared by both routers.
fn finish(raw_logits: Vec<f64>, suppressed_logits: Vec<f64>, penalty_mask: Vec<bool>, k: usize) -> RoutingDecision {
    let selected = numerics::top_k_unchecked(&suppressed_logits, k);
    let weights = numerics::softmax_over_unchecked(&suppressed_logits, &selected);
    RoutingDecision {
        selected,
        weights,
        suppressed_logits,
        penalty_mask,
        raw_logits,
    }
}

pub(crate) fn route_logits_baseline(logits: Vec<f64>, k: usize) -> RoutingDecision {
    let n = logits.len();
    finish(logits.clone(), logits, vec![false; n], k)
}

pub(crate) fn route_logits_gatepro(
    logits: Vec<f64>,
    cmap: &CounterpartMap,
    lambda: f64,
    k: usize,
) -> RoutingDecision {
    let (suppressed, mask) = compete(&logits, cmap, lambda);
    finish(logits, suppressed, mask, k)
}

/// Plain top-k routing.
pub fn route_baseline(x: &[f64], g: &GatingWeights, k: usize) -> Result<RoutingDecision> {
    check_dim(x, g)?;
    check_k(k, g.n_experts())?;
    let mut logits = vec![0.0; g.n_experts()];
    matvec_into(&g.w, x, &mut logits);
    Ok(route_logits_baseline(logits, k))
}

/// Competitive routing against a similarity snapshot of `g`.
pub fn route_gatepro(
    x: &[f64],
    g: &GatingWeights,
    cache: &SimilarityCache,
    cfg: &GateProConfig,
) -> Result<RoutingDecision> {
    check_dim(x, g)?;
    cfg.validate(g.n_experts())?;
    if cache.counterparts.len() != g.n_experts() {
        return Err(Error::contract("similarity cache does not match gate size"));
    }
    let mut logits = vec![0.0; g.n_experts()];
    matvec_into(&g.w, x, &mut logits);
    Ok(route_logits_gatepro(logits, &cache.counterparts, cfg.lambda, cfg.k))
}
