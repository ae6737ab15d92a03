//! Held-out evaluation and run-versus-run comparison reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::SyntheticTask;
use super::log::{read_metrics, METRICS_FILE};
use super::train::{CONFIG_FILE, FINAL_CHECKPOINT};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::moe::{build_caches, stack_forward, MoeStackParams};
use crate::numerics::{top_k_unchecked, Rng};
use crate::router::{GateProConfig, RoutingMode};

/// Tokens and seed used for the held-out accuracy in comparison reports.
pub const REPORT_EVAL_TOKENS: usize = 4096;
pub const REPORT_EVAL_SEED: u64 = 0x5EED_E7A1;

/// Fraction of `n_tokens` fresh tokens whose argmax readout logit is the label.
pub fn accuracy(
    params: &MoeStackParams,
    task: &SyntheticTask,
    mode: RoutingMode,
    cfg: &GateProConfig,
    n_tokens: usize,
    seed: u64,
) -> Result<f64> {
    if n_tokens == 0 {
        return Err(Error::config("evaluation needs at least one token"));
    }
    let caches = match mode {
        RoutingMode::GatePro => build_caches(params)?,
        RoutingMode::Baseline => Vec::new(),
    };
    let batch = task.gen_batch(&mut Rng::new(seed), n_tokens);
    let mut correct = 0usize;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let out = stack_forward(params, x, mode, cfg, &caches)?;
        if top_k_unchecked(&out.logits, 1)[0] == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_tokens as f64)
}

/// Accuracy of a checkpoint on its own task, routed with the mode its
/// schedule assigned to the last completed step.
pub fn eval_accuracy(ckpt: &Path, n_tokens: usize, seed: u64) -> Result<f64> {
    let ck = Checkpoint::load(ckpt)?;
    let task = SyntheticTask::new(ck.config.task.clone())?;
    let mode = ck.config.schedule.mode_at(ck.step.saturating_sub(1));
    accuracy(&ck.params, &task, mode, &ck.config.gatepro(), n_tokens, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDelta {
    pub step: u64,
    pub zero_token_count: i64,
    pub avg_cos_sim: f64,
    pub avg_angle: f64,
    pub spectral_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub layer: usize,
    pub steps_to_activation_a: Option<u64>,
    pub steps_to_activation_b: Option<u64>,
    pub final_avg_cos_sim_a: f64,
    pub final_avg_cos_sim_b: f64,
    pub final_avg_cos_sim_delta: f64,
    pub final_spectral_entropy_a: f64,
    pub final_spectral_entropy_b: f64,
    pub final_spectral_entropy_delta: f64,
    /// `b - a` at every step logged by both runs.
    pub series: Vec<SeriesDelta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    /// Steps-to-activation counts a layer as active once its zero-token
    /// count is at most this.
    pub activation_threshold: usize,
    pub layers: Vec<LayerComparison>,
    pub final_accuracy_a: f64,
    pub final_accuracy_b: f64,
    pub final_accuracy_delta: f64,
}

/// `ceil(0.05 * N)`.
pub fn default_activation_threshold(n_experts: usize) -> usize {
    (n_experts * 5).div_ceil(100)
}

/// First logged step at which `layer` has at most `threshold` idle experts.
pub fn steps_to_activation(rows: &[MetricsRecord], layer: usize, threshold: usize) -> Option<u64> {
    rows.iter()
        .filter(|r| r.layer == layer)
        .find(|r| r.zero_token_count <= threshold)
        .map(|r| r.step)
}

fn check_comparable(a: &RunConfig, b: &RunConfig) -> Result<()> {
    let mismatch = |what: &str| Err(Error::config(format!("runs differ in {what}; refusing to compare")));
    if a.task != b.task {
        return mismatch("task");
    }
    if a.n_experts != b.n_experts {
        return mismatch("n_experts");
    }
    if a.top_k != b.top_k {
        return mismatch("top_k");
    }
    if a.layers != b.layers {
        return mismatch("layers");
    }
    if a.steps != b.steps {
        return mismatch("steps");
    }
    Ok(())
}

fn last_for_layer(rows: &[MetricsRecord], layer: usize) -> Option<&MetricsRecord> {
    rows.iter().rev().find(|r| r.layer == layer)
}

/// Builds the report from two runs' logged metrics and held-out accuracies.
pub fn compare_metrics(
    name_a: &str,
    rows_a: &[MetricsRecord],
    name_b: &str,
    rows_b: &[MetricsRecord],
    layers: usize,
    threshold: usize,
    accuracy_a: f64,
    accuracy_b: f64,
) -> Result<CompareReport> {
    let mut out = Vec::with_capacity(layers);
    for layer in 0..layers {
        let (Some(fa), Some(fb)) = (last_for_layer(rows_a, layer), last_for_layer(rows_b, layer)) else {
            return Err(Error::config(format!("layer {layer} missing from a metrics log")));
        };
        let series = rows_a
            .iter()
            .filter(|r| r.layer == layer)
            .filter_map(|ra| {
                rows_b
                    .iter()
                    .find(|rb| rb.layer == layer && rb.step == ra.step)
                    .map(|rb| SeriesDelta {
                        step: ra.step,
                        zero_token_count: rb.zero_token_count as i64 - ra.zero_token_count as i64,
                        avg_cos_sim: rb.avg_cos_sim - ra.avg_cos_sim,
                        avg_angle: rb.avg_angle - ra.avg_angle,
                        spectral_entropy: rb.spectral_entropy - ra.spectral_entropy,
                    })
            })
            .collect();
        out.push(LayerComparison {
            layer,
            steps_to_activation_a: steps_to_activation(rows_a, layer, threshold),
            steps_to_activation_b: steps_to_activation(rows_b, layer, threshold),
            final_avg_cos_sim_a: fa.avg_cos_sim,
            final_avg_cos_sim_b: fb.avg_cos_sim,
            final_avg_cos_sim_delta: fb.avg_cos_sim - fa.avg_cos_sim,
            final_spectral_entropy_a: fa.spectral_entropy,
            final_spectral_entropy_b: fb.spectral_entropy,
            final_spectral_entropy_delta: fb.spectral_entropy - fa.spectral_entropy,
            series,
        });
    }
    Ok(CompareReport {
        run_a: name_a.to_string(),
        run_b: name_b.to_string(),
        activation_threshold: threshold,
        layers: out,
        final_accuracy_a: accuracy_a,
        final_accuracy_b: accuracy_b,
        final_accuracy_delta: accuracy_b - accuracy_a,
    })
}

/// Compares two run directories produced by `train`.
pub fn compare(run_a: &Path, run_b: &Path) -> Result<CompareReport> {
    let cfg_a = RunConfig::load(&run_a.join(CONFIG_FILE))?;
    let cfg_b = RunConfig::load(&run_b.join(CONFIG_FILE))?;
    check_comparable(&cfg_a, &cfg_b)?;
    let rows_a = read_metrics(&run_a.join(METRICS_FILE))?;
    let rows_b = read_metrics(&run_b.join(METRICS_FILE))?;
    let acc_a = eval_accuracy(&run_a.join(FINAL_CHECKPOINT), REPORT_EVAL_TOKENS, REPORT_EVAL_SEED)?;
    let acc_b = eval_accuracy(&run_b.join(FINAL_CHECKPOINT), REPORT_EVAL_TOKENS, REPORT_EVAL_SEED)?;
    compare_metrics(
        &run_a.display().to_string(),
        &rows_a,
        &run_b.display().to_string(),
        &rows_b,
        cfg_a.layers,
        default_activation_threshold(cfg_a.n_experts),
        acc_a,
        acc_b,
    )
}
