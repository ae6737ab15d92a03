//! Helpers shared by the integration and acceptance tests: random fixtures,
//! a finite-difference gradient checker and metric oracles written
//! independently of the library code.

#![allow(dead_code)]

use gatepro_core::harness::{RunConfig, SyntheticTask, SyntheticTaskSpec};
use gatepro_core::{
    build_caches, stack_backward, stack_forward, Batch, GateProConfig, GatingWeights, Matrix, MoeStackParams, Rng,
    RoutingMode, SimilarityCache, SimilarityMatrix, StackDims,
};

pub fn gaussian_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.next_gaussian()).collect()
}

pub fn random_gates(rng: &mut Rng, n: usize, d: usize) -> GatingWeights {
    GatingWeights::new(Matrix::new(n, d, gaussian_vec(rng, n * d)).unwrap()).unwrap()
}

/// Small run config that trains in well under a second.
pub fn tiny_config(out_dir: &std::path::Path) -> RunConfig {
    RunConfig {
        n_experts: 6,
        top_k: 2,
        dim: 8,
        hidden: 16,
        layers: 2,
        batch_size: 32,
        steps: 40,
        metrics_every: 5,
        out_dir: out_dir.to_path_buf(),
        task: SyntheticTaskSpec {
            n_clusters: 6,
            dim: 8,
            n_classes: 3,
            ..SyntheticTaskSpec::default()
        },
        ..RunConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Distance of a parameter point from every discontinuity of the routing:
/// top-k boundaries, winner comparisons and counterpart argmaxes.
pub fn routing_margin(p: &MoeStackParams, batch: &Batch, mode: RoutingMode, cfg: &GateProConfig) -> f64 {
    let caches = match mode {
        RoutingMode::GatePro => build_caches(p).unwrap(),
        RoutingMode::Baseline => Vec::new(),
    };
    let mut margin = f64::INFINITY;
    for c in &caches {
        let s = &c.similarity;
        for i in 0..s.n() {
            let mut row: Vec<f64> = (0..s.n()).filter(|&j| j != i).map(|j| s.get(i, j)).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            if row.len() > 1 {
                margin = margin.min(row[0] - row[1]);
            }
        }
    }
    for x in &batch.inputs {
        let out = stack_forward(p, x, mode, cfg, &caches).unwrap();
        for (l, dec) in out.decisions.iter().enumerate() {
            let n = dec.raw_logits.len();
            let lowest_in = dec
                .selected
                .iter()
                .map(|&i| dec.suppressed_logits[i])
                .fold(f64::INFINITY, f64::min);
            let highest_out = (0..n)
                .filter(|i| !dec.selected.contains(i))
                .map(|i| dec.suppressed_logits[i])
                .fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min(lowest_in - highest_out);
            if mode == RoutingMode::GatePro {
                let cmap = &caches[l].counterparts;
                for i in 0..n {
                    let j = cmap.counterpart(i);
                    margin = margin.min((dec.raw_logits[i] - dec.raw_logits[j]).abs());
                }
            }
        }
    }
    margin
}

fn loss_at(p: &MoeStackParams, batch: &Batch, mode: RoutingMode, cfg: &GateProConfig, coeff: f64) -> f64 {
    let caches: Vec<SimilarityCache> = match mode {
        RoutingMode::GatePro => build_caches(p).unwrap(),
        RoutingMode::Baseline => Vec::new(),
    };
    stack_backward(p, batch, mode, cfg, &caches, coeff).unwrap().loss
}

#[derive(Clone, Debug)]
pub struct FdResult {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_EPS: f64 = 1e-5;

/// Central differences on `per_kind` random entries of the gate, expert and
/// readout tensors each (experts restricted to those receiving tokens).
pub fn finite_difference_check(
    p: &MoeStackParams,
    batch: &Batch,
    mode: RoutingMode,
    cfg: &GateProConfig,
    coeff: f64,
    per_kind: usize,
    rng: &mut Rng,
) -> Vec<FdResult> {
    let caches = match mode {
        RoutingMode::GatePro => build_caches(p).unwrap(),
        RoutingMode::Baseline => Vec::new(),
    };
    let out = stack_backward(p, batch, mode, cfg, &caches, coeff).unwrap();
    let names: Vec<String> = p.tensors().iter().map(|t| t.name.clone()).collect();
    let grads = out.grads.tensors();
    let dims = p.dims();

    let pick = |rng: &mut Rng, pred: &dyn Fn(&str) -> bool| -> usize {
        let candidates: Vec<usize> = (0..names.len()).filter(|&t| pred(&names[t])).collect();
        candidates[rng.next_below(candidates.len())]
    };
    let used_expert = |name: &str| -> bool {
        // layer{l}.expert{e}.<w>
        let Some(rest) = name.strip_prefix("layer") else { return false };
        let Some((l, rest)) = rest.split_once(".expert") else { return false };
        let (e, _) = rest.split_once('.').unwrap();
        let (l, e): (usize, usize) = (l.parse().unwrap(), e.parse().unwrap());
        out.stats[l].tokens_per_expert[e] > 0
    };
    let mut chosen = Vec::new();
    for _ in 0..per_kind {
        chosen.push(pick(rng, &|n| n.ends_with(".gate")));
        chosen.push(pick(rng, &used_expert));
        chosen.push(pick(rng, &|n| n == "readout"));
    }
    assert!(dims.layers > 0);

    let mut results = Vec::new();
    for t in chosen {
        let len = grads[t].len();
        let index = rng.next_below(len);
        let mut plus = p.clone();
        plus.tensors_mut()[t][index] += FD_EPS;
        let mut minus = p.clone();
        minus.tensors_mut()[t][index] -= FD_EPS;
        let numeric =
            (loss_at(&plus, batch, mode, cfg, coeff) - loss_at(&minus, batch, mode, cfg, coeff)) / (2.0 * FD_EPS);
        let analytic = grads[t][index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        results.push(FdResult {
            tensor: names[t].clone(),
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    results
}

/// A small stack and batch whose routing is at least `margin` away from
/// every tie, searched over seeds starting at `seed`.
pub fn tie_free_point(
    dims: StackDims,
    mode: RoutingMode,
    cfg: &GateProConfig,
    batch_size: usize,
    margin: f64,
    seed: u64,
) -> (MoeStackParams, Batch, u64) {
    let spec = SyntheticTaskSpec {
        n_clusters: 8,
        dim: dims.dim,
        n_classes: dims.classes,
        cluster_spread: 0.5,
        seed: 11,
    };
    let task = SyntheticTask::new(spec).unwrap();
    for s in seed.. {
        let mut rng = Rng::new(s);
        let mut p = MoeStackParams::init(dims, &mut rng).unwrap();
        // Scale up output projections and give biases random values.
        for layer in &mut p.layers {
            for e in &mut layer.experts {
                for v in e.w2.data_mut() {
                    *v *= 5.0;
                }
                for v in e.b1.iter_mut().chain(e.b2.iter_mut()) {
                    *v = 0.1 * rng.next_gaussian();
                }
            }
        }
        let batch = task.gen_batch(&mut rng, batch_size);
        if routing_margin(&p, &batch, mode, cfg) >= margin {
            return (p, batch, s);
        }
    }
    unreachable!()
}

// ---------------------------------------------------------------------------
// Metric oracles

pub fn oracle_avg_cos(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                acc += s.get(i, j).abs();
                pairs += 1;
            }
        }
    }
    acc / pairs as f64
}

pub fn oracle_avg_angle(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                acc += s.get(i, j).clamp(-1.0, 1.0).acos();
                pairs += 1;
            }
        }
    }
    acc / pairs as f64
}

/// Eigenvalues of a symmetric matrix with N <= 3 from its characteristic
/// polynomial (trigonometric solution of the depressed cubic for N = 3).
pub fn charpoly_eigenvalues(s: &Matrix) -> Vec<f64> {
    match s.rows() {
        2 => {
            let (a, b, d) = (s.get(0, 0), s.get(0, 1), s.get(1, 1));
            let mean = 0.5 * (a + d);
            let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mean + r, mean - r]
        }
        3 => {
            let m = |i, j| s.get(i, j);
            let p1 = m(0, 1).powi(2) + m(0, 2).powi(2) + m(1, 2).powi(2);
            let q = (m(0, 0) + m(1, 1) + m(2, 2)) / 3.0;
            let p2 = (m(0, 0) - q).powi(2) + (m(1, 1) - q).powi(2) + (m(2, 2) - q).powi(2) + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            if p == 0.0 {
                return vec![q; 3];
            }
            let b = |i: usize, j: usize| (m(i, j) - if i == j { q } else { 0.0 }) / p;
            let det_b = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
            let r = (det_b / 2.0).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let e1 = q + 2.0 * p * phi.cos();
            let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            let e2 = 3.0 * q - e1 - e3;
            vec![e1, e2, e3]
        }
        n => panic!("characteristic polynomial oracle only handles N in 2..=3, got {n}"),
    }
}

/// Classical Jacobi: always annihilate the largest off-diagonal entry.
pub fn max_pivot_jacobi_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
    for _ in 0..100 * n * n {
        let (mut p, mut q, mut big) = (0, 1, 0.0f64);
        for i in 0..n {
            for j in i + 1..n {
                if a[i][j].abs() > big {
                    big = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if big < 1e-15 {
            break;
        }
        let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let t = if theta == 0.0 { 1.0 } else { t };
        let c = 1.0 / (t * t + 1.0).sqrt();
        let sn = t * c;
        for k in 0..n {
            let (akp, akq) = (a[k][p], a[k][q]);
            a[k][p] = c * akp - sn * akq;
            a[k][q] = sn * akp + c * akq;
        }
        for k in 0..n {
            let (apk, aqk) = (a[p][k], a[q][k]);
            a[p][k] = c * apk - sn * aqk;
            a[q][k] = sn * apk + c * aqk;
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn oracle_spectral_entropy(eigenvalues: &[f64]) -> f64 {
    let eps = 1e-8;
    let n = eigenvalues.len() as f64;
    let total: f64 = eigenvalues.iter().map(|v| v.abs()).sum::<f64>() + n * eps;
    let mut h = 0.0;
    for v in eigenvalues {
        let p = (v.abs() + eps) / total;
        h -= p * p.ln();
    }
    h
}

/// Cosine similarity of random gate rows, computed directly.
pub fn random_similarity(rng: &mut Rng, n: usize, d: usize) -> (GatingWeights, SimilarityMatrix) {
    let g = random_gates(rng, n, d);
    let w = g.matrix();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (w.row(i), w.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            s.set(i, j, if i == j { 1.0 } else { dot / (na * nb) });
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = s.get(j, i);
            s.set(i, j, v);
        }
    }
    (g, SimilarityMatrix::from_matrix(s).unwrap())
}
