use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticTaskSpec;
use super::schedule::HotSwapSchedule;
use crate::error::{Error, Result};
use crate::moe::StackDims;
use crate::router::{GateProConfig, RoutingMode, SimilarityRefresh};

/// Everything needed to reproduce a training run. Read from a TOML
/// key/value file whose keys are exactly these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lambda: f64,
    pub balance_coeff: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub metrics_every: u64,
    pub out_dir: PathBuf,
    pub schedule: HotSwapSchedule,
    pub task: SyntheticTaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_experts: 16,
            top_k: 2,
            dim: 32,
            hidden: 128,
            layers: 3,
            lambda: 1e-4,
            balance_coeff: 0.01,
            lr: 1e-3,
            batch_size: 256,
            steps: 5000,
            seed: 0,
            metrics_every: 10,
            out_dir: PathBuf::from("runs/default"),
            schedule: HotSwapSchedule::constant(RoutingMode::GatePro),
            task: SyntheticTaskSpec::default(),
        }
    }
}

fn positive_finite(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn nonnegative_finite(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be nonnegative and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 2 {
            return Err(Error::config("n_experts must be at least 2"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(format!(
                "top_k must lie in 1..=n_experts ({}), got {}",
                self.n_experts, self.top_k
            )));
        }
        if self.dim == 0 || self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::config("dim, hidden, layers and batch_size must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.metrics_every == 0 {
            return Err(Error::config("metrics_every must be at least 1"));
        }
        nonnegative_finite("lambda", self.lambda)?;
        nonnegative_finite("balance_coeff", self.balance_coeff)?;
        positive_finite("lr", self.lr)?;
        self.task.validate()?;
        if self.task.dim != self.dim {
            return Err(Error::config(format!(
                "task.dim ({}) must equal dim ({})",
                self.task.dim, self.dim
            )));
        }
        Ok(())
    }

    pub fn stack_dims(&self) -> StackDims {
        StackDims {
            n_experts: self.n_experts,
            dim: self.dim,
            hidden: self.hidden,
            layers: self.layers,
            classes: self.task.n_classes,
        }
    }

    pub fn gatepro(&self) -> GateProConfig {
        GateProConfig {
            lambda: self.lambda,
            k: self.top_k,
            similarity_refresh: SimilarityRefresh::PerStep,
        }
    }

    pub fn balance_loss_on(&self) -> bool {
        self.balance_coeff > 0.0
    }
}
