use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::SyntheticTask;
use super::log::{MetricsLogWriter, METRICS_FILE};
use crate::error::{Error, Result};
use crate::metrics::{avg_angle, avg_cosine_similarity, spectral_entropy, zero_token_count, MetricsRecord};
use crate::moe::{adam_step, build_caches, stack_backward, AdamState, MoeStackParams};
use crate::numerics::Rng;
use crate::router::{gate_similarity, RoutingDecision, RoutingMode, SimilarityCache};

pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step{step}.ckpt")
}

/// What happened during one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: u64,
    pub mode: RoutingMode,
    pub loss: f64,
    pub task_loss: f64,
    pub balance_losses: Vec<f64>,
    pub accuracy: f64,
    /// `decisions[layer][token]` for this step's batch.
    pub decisions: Vec<Vec<RoutingDecision>>,
    /// One row per layer when this step is a metrics step, else empty.
    pub records: Vec<MetricsRecord>,
}

/// Owns the full training state. Stepping is deterministic given the config
/// (or the checkpoint it was resumed from).
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: RunConfig,
    task: SyntheticTask,
    params: MoeStackParams,
    adam: AdamState,
    data_rng: Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let task = SyntheticTask::new(cfg.task.clone())?;
        let mut root = Rng::new(cfg.seed);
        let mut init_rng = root.fork();
        let data_rng = root.fork();
        let params = MoeStackParams::init(cfg.stack_dims(), &mut init_rng)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            cfg,
            task,
            params,
            adam,
            data_rng,
            step: 0,
        })
    }

    /// Continues from `ck` under a possibly different config (schedule,
    /// penalty, step budget, output directory). Model shape and task must
    /// match the checkpoint.
    pub fn from_checkpoint(ck: Checkpoint, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.stack_dims() != ck.config.stack_dims() || cfg.task != ck.config.task || cfg.top_k != ck.config.top_k {
            return Err(Error::config(
                "resume config disagrees with the checkpoint on model shape, top_k or task",
            ));
        }
        let task = SyntheticTask::new(cfg.task.clone())?;
        Ok(Trainer {
            cfg,
            task,
            params: ck.params,
            adam: ck.adam,
            data_rng: ck.data_rng,
            step: ck.step,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn params(&self) -> &MoeStackParams {
        &self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn data_rng(&self) -> Rng {
        self.data_rng
    }

    /// Index of the next step to run.
    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            data_rng: self.data_rng,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let mode = self.cfg.schedule.mode_at(step);
        let gp = self.cfg.gatepro();
        let numerical = |what: String| Error::Numerical { step, what };

        let caches: Vec<SimilarityCache> = match mode {
            RoutingMode::GatePro => build_caches(&self.params).map_err(|e| numerical(e.to_string()))?,
            RoutingMode::Baseline => Vec::new(),
        };
        let batch = self.task.gen_batch(&mut self.data_rng, self.cfg.batch_size);
        let out = stack_backward(&self.params, &batch, mode, &gp, &caches, self.cfg.balance_coeff)?;
        if !out.loss.is_finite() {
            return Err(numerical(format!("loss is {}", out.loss)));
        }
        let accuracy = out.correct as f64 / batch.len() as f64;

        let mut records = Vec::new();
        if step.is_multiple_of(self.cfg.metrics_every) {
            for (l, layer) in self.params.layers.iter().enumerate() {
                let fresh;
                let s = match caches.get(l) {
                    Some(c) => &c.similarity,
                    None => {
                        fresh = gate_similarity(&layer.gating).map_err(|e| numerical(e.to_string()))?;
                        &fresh
                    }
                };
                records.push(MetricsRecord {
                    step,
                    layer: l,
                    mode,
                    balance_loss_on: self.cfg.balance_loss_on(),
                    zero_token_count: zero_token_count(&out.decisions[l], layer.n_experts()),
                    avg_cos_sim: avg_cosine_similarity(s),
                    avg_angle: avg_angle(s),
                    spectral_entropy: spectral_entropy(s),
                    task_loss: out.task_loss,
                    balance_loss: out.balance_losses[l],
                    accuracy_estimate: accuracy,
                });
            }
        }

        adam_step(&mut self.params, &out.grads, &mut self.adam, self.cfg.lr)?;
        if !self.params.all_finite() {
            return Err(numerical("non-finite parameter after update".into()));
        }
        self.step += 1;
        Ok(StepReport {
            step,
            mode,
            loss: out.loss,
            task_loss: out.task_loss,
            balance_losses: out.balance_losses,
            accuracy,
            decisions: out.decisions,
            records,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Start from this checkpoint instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
    /// Write `step<N>.ckpt` holding the state before step N runs.
    pub checkpoint_at: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub first_step: u64,
    pub steps_run: u64,
    pub final_loss: f64,
    pub metrics_rows: usize,
}

pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    train_with(cfg, &TrainOptions::default())
}

/// Runs training, writing `config.toml`, `metrics.jsonl`, any requested
/// intermediate checkpoints and `final.ckpt` into `cfg.out_dir`.
pub fn train_with(cfg: &RunConfig, opts: &TrainOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path)?, cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    let mut log = MetricsLogWriter::create(&dir.join(METRICS_FILE))?;

    let first_step = trainer.current_step();
    let mut final_loss = f64::NAN;
    let mut rows = 0;
    while !trainer.is_done() {
        if opts.checkpoint_at.contains(&trainer.current_step()) {
            save_checkpoint(&trainer, &dir.join(step_checkpoint_name(trainer.current_step())))?;
        }
        let report = trainer.step()?;
        for r in &report.records {
            log.append(r)?;
        }
        rows += report.records.len();
        final_loss = report.loss;
    }
    log.flush()?;
    save_checkpoint(&trainer, &dir.join(FINAL_CHECKPOINT))?;
    Ok(RunSummary {
        run_dir: dir.to_path_buf(),
        first_step,
        steps_run: trainer.current_step() - first_step,
        final_loss,
        metrics_rows: rows,
    })
}

fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    trainer.checkpoint().save(path)
}
