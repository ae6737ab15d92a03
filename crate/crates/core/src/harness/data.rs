//! Cluster-conditional synthetic classification task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Batch;
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_clusters: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_clusters: 16,
            dim: 32,
            n_classes: 8,
            cluster_spread: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::config("task.n_clusters must be at least 2"));
        }
        if self.dim == 0 || self.n_classes == 0 {
            return Err(Error::config("task.dim and task.n_classes must be positive"));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config("task.cluster_spread must be finite and nonnegative"));
        }
        Ok(())
    }
}

const SHARED_SCALE: f64 = 2.0;

/// A task instance: fixed cluster centres and cluster-to-class map.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    centers: Matrix,
    class_of: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed);
        let shared: Vec<f64> = (0..spec.dim).map(|_| SHARED_SCALE * rng.next_gaussian()).collect();
        let mut centers = Matrix::zeros(spec.n_clusters, spec.dim);
        for row in centers.data_mut().chunks_exact_mut(spec.dim) {
            for (v, &s) in row.iter_mut().zip(&shared) {
                *v = s + rng.next_gaussian();
            }
        }
        // Shuffle clusters, then deal classes round-robin so every class
        // owns clusters whenever n_clusters >= n_classes.
        let mut order: Vec<usize> = (0..spec.n_clusters).collect();
        for i in (1..order.len()).rev() {
            let j = rng.next_below(i + 1);
            order.swap(i, j);
        }
        let mut class_of = vec![0; spec.n_clusters];
        for (pos, &cluster) in order.iter().enumerate() {
            class_of[cluster] = pos % spec.n_classes;
        }
        Ok(SyntheticTask {
            spec,
            centers,
            class_of,
        })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn center(&self, cluster: usize) -> &[f64] {
        self.centers.row(cluster)
    }

    pub fn class_of(&self, cluster: usize) -> usize {
        self.class_of[cluster]
    }

    /// Draws a batch and the cluster of every token.
    pub fn gen_batch_with_clusters(&self, rng: &mut Rng, batch_size: usize) -> (Batch, Vec<usize>) {
        let mut batch = Batch {
            inputs: Vec::with_capacity(batch_size),
            labels: Vec::with_capacity(batch_size),
        };
        let mut clusters = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let c = rng.next_below(self.spec.n_clusters);
            let x: Vec<f64> = self
                .center(c)
                .iter()
                .map(|&m| m + self.spec.cluster_spread * rng.next_gaussian())
                .collect();
            batch.inputs.push(x);
            batch.labels.push(self.class_of[c]);
            clusters.push(c);
        }
        (batch, clusters)
    }

    pub fn gen_batch(&self, rng: &mut Rng, batch_size: usize) -> Batch {
        self.gen_batch_with_clusters(rng, batch_size).0
    }
}
