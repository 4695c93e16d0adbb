//! Meta-training on streams of prior tasks.

mod optim;

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{clip_global_norm, Adam, LrSchedule};

use crate::model::{encode, forward, BinGrid, BinStrategy, DropoutSource, EncodedTask, ModelCheckpoint, ModelConfig, ModelError};
use crate::numcore::{global_norm, NumError, Tape, Tensor};
use crate::prior::{sample_task_at, task_rng, PriorConfig, PriorError, PriorFamily, Task};

/// Validation tasks come from this far along the task stream, well past
/// anything a training run reaches.
pub const VALIDATION_OFFSET: u64 = 1 << 48;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} (task index {task_index}, prior seed {seed})")]
    NonFinite { step: usize, task_index: u64, seed: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub tasks_per_step: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    /// Seeds weight initialization and dropout; tasks follow the prior's seed.
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub val_tasks: usize,
    /// Log (and validate) every this many steps, plus the first and last.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            tasks_per_step: 16,
            schedule: LrSchedule { peak: 1e-3, warmup_steps: 200, final_fraction: 0.05 },
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
            val_tasks: 64,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.tasks_per_step == 0 {
            return bad("tasks_per_step must be at least 1");
        }
        if !(self.schedule.peak > 0.0) || !self.schedule.peak.is_finite() {
            return bad("peak learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.schedule.final_fraction) {
            return bad("final_fraction must lie in [0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }
}

/// Bar negative log-likelihood, averaged over rows, of standardized targets
/// `z` under `grid` given per-row `logits`.
pub fn bar_nll(logits: &[Vec<f64>], z: &[f64], grid: &BinGrid) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(z)
        .map(|(row, &zi)| {
            let (k, shape) = grid.shape_log_density(zi);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            lse - row[k] - shape
        })
        .sum();
    total / logits.len() as f64
}

/// One line of the NDJSON training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub wallclock_s: f64,
}

/// Progress callbacks.
pub enum TrainEvent<'a> {
    Log(&'a LogRecord),
    Checkpoint { step: usize, checkpoint: &'a ModelCheckpoint },
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<LogRecord>,
    pub total_tasks: u64,
}

struct RngDropout {
    rng: ChaCha8Rng,
    keep: f64,
}

impl DropoutSource for RngDropout {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| if self.rng.random::<f64>() < self.keep { 1.0 / self.keep } else { 0.0 }).collect()
    }
}

/// Loss and parameter gradients for one task whose `y_test` is present.
pub fn task_gradients(
    model: &ModelConfig,
    weights: &[Tensor<f32>],
    enc: &EncodedTask,
    y_test: &[f64],
    dropout: Option<&mut dyn DropoutSource>,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let params: Vec<_> = weights.iter().map(|w| tape.param(w.clone())).collect();
    let logits = forward(&mut tape, model, &params, enc, dropout)?;
    let (targets, shapes) = enc.targets(y_test);
    let ce = tape.cross_entropy(logits, targets)?;
    let loss = tape.value(ce).data()[0] as f64 - shapes.iter().sum::<f64>() / shapes.len() as f64;
    let grads = tape.backward(ce, &params)?;
    Ok((loss, grads))
}

/// Validation NLL of `weights` on pre-encoded tasks.
pub fn validation_nll(
    model: &ModelConfig,
    weights: &[Tensor<f32>],
    tasks: &[(EncodedTask, Vec<f64>)],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (enc, y) in tasks {
        let logits = crate::model::task_logits(model, weights, enc)?;
        let rows: Vec<Vec<f64>> = (0..enc.n_test).map(|i| logits.row(i).iter().map(|&v| v as f64).collect()).collect();
        let z: Vec<f64> = y.iter().map(|&v| enc.transform.forward(v)).collect();
        total += bar_nll(&rows, &z, &enc.grid);
    }
    Ok(total / tasks.len().max(1) as f64)
}

pub fn encode_labelled(model: &ModelConfig, bins: &BinStrategy, task: &Task) -> Result<(EncodedTask, Vec<f64>), TrainError> {
    let y = task
        .y_test
        .clone()
        .ok_or_else(|| TrainError::InvalidConfig("training tasks need test targets".into()))?;
    Ok((encode(model, bins, task)?, y))
}

pub fn validation_set(
    prior: &PriorConfig,
    model: &ModelConfig,
    bins: &BinStrategy,
    n: usize,
) -> Result<Vec<(EncodedTask, Vec<f64>)>, TrainError> {
    (0..n as u64)
        .map(|i| encode_labelled(model, bins, &sample_task_at(prior, VALIDATION_OFFSET + i)?))
        .collect()
}

fn check_fit(prior: &PriorConfig, model: &ModelConfig) -> Result<(), TrainError> {
    let (features, rows) = match &prior.family {
        PriorFamily::Scm => (prior.max_features, prior.max_rows),
        PriorFamily::Conjugate(c) => (0, c.n_train.max + c.n_test),
    };
    if features > model.max_features || rows > model.max_rows {
        return Err(TrainError::InvalidConfig(format!(
            "prior draws up to {features} features × {rows} rows, model holds {} × {}",
            model.max_features, model.max_rows
        )));
    }
    Ok(())
}

/// Trains from freshly initialized weights.
pub fn train(
    prior: &PriorConfig,
    model: &ModelConfig,
    bins: &BinStrategy,
    cfg: &TrainConfig,
    on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome, TrainError> {
    let weights = model.init_weights(cfg.seed);
    train_from(prior, model, bins, cfg, weights, on_event)
}

/// Trains starting from `weights`.
pub fn train_from(
    prior: &PriorConfig,
    model: &ModelConfig,
    bins: &BinStrategy,
    cfg: &TrainConfig,
    mut weights: Vec<Tensor<f32>>,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome, TrainError> {
    prior.validate()?;
    model.validate()?;
    bins.validate()?;
    cfg.validate()?;
    check_fit(prior, model)?;
    model.check_weights(&weights)?;

    let start = Instant::now();
    let val = validation_set(prior, model, bins, cfg.val_tasks)?;
    let mut adam = Adam::new(&weights);
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;
    let scale = 1.0 / cfg.tasks_per_step as f32;

    for step in 0..cfg.steps {
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let mut step_loss = 0.0;
        for j in 0..cfg.tasks_per_step {
            let index = (step * cfg.tasks_per_step + j) as u64;
            let task = sample_task_at(prior, index)?;
            let (enc, y) = encode_labelled(model, bins, &task)?;
            let mut drop_src = RngDropout { rng: task_rng(cfg.seed, index), keep: 1.0 - model.dropout_rate };
            let dropout: Option<&mut dyn DropoutSource> =
                if model.dropout_rate > 0.0 { Some(&mut drop_src) } else { None };
            let (loss, grads) = task_gradients(model, &weights, &enc, &y, dropout)?;
            if !loss.is_finite() || !grads.iter().all(|g| g.data().iter().all(|v| v.is_finite())) {
                return Err(TrainError::NonFinite { step, task_index: index, seed: prior.seed });
            }
            step_loss += loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("tasks_per_step ≥ 1");
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut weights, &grads, cfg.schedule.rate(step, cfg.steps));
        running += step_loss / cfg.tasks_per_step as f64;
        running_n += 1;

        let done = step + 1;
        if done == 1 || done % cfg.log_every == 0 || done == cfg.steps {
            let val_nll = validation_nll(model, &weights, &val)?;
            if !val_nll.is_finite() {
                return Err(TrainError::NonFinite { step, task_index: VALIDATION_OFFSET, seed: prior.seed });
            }
            let rec = LogRecord {
                step: done,
                train_nll: running / running_n as f64,
                val_nll,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            on_event(TrainEvent::Log(&rec));
            log.push(rec);
            running = 0.0;
            running_n = 0;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
            let ck = ModelCheckpoint::new(*model, prior.clone(), *bins, weights.clone())?;
            on_event(TrainEvent::Checkpoint { step: done, checkpoint: &ck });
        }
    }

    let checkpoint = ModelCheckpoint::new(*model, prior.clone(), *bins, weights)?;
    Ok(TrainOutcome { checkpoint, log, total_tasks: (cfg.steps * cfg.tasks_per_step) as u64 })
}

/// Global gradient norm, exposed for diagnostics.
pub fn gradient_norm(grads: &[Tensor<f32>]) -> f64 {
    global_norm(grads)
}
