//! In-context prediction: one forward pass per task, no weight updates.

mod distribution;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use distribution::PredictiveDistribution;

use crate::model::{forward_task, ModelCheckpoint, ModelError};
use crate::prior::Task;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Summary of one test row's predictive distribution, in task units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    /// Absent for sample-based predictors.
    pub distribution: Option<PredictiveDistribution>,
}

impl Prediction {
    pub fn from_distribution(d: PredictiveDistribution) -> Result<Self, InferError> {
        Ok(Self {
            mean: d.mean(),
            q025: d.quantile(0.025)?,
            q500: d.quantile(0.5)?,
            q975: d.quantile(0.975)?,
            distribution: Some(d),
        })
    }

    /// For a distribution over `ln(v)`: summaries of `v`. Quantiles map
    /// through `exp`, the mean is `E[exp(Y)]`.
    pub fn from_log_distribution(d: PredictiveDistribution) -> Result<Self, InferError> {
        Ok(Self {
            mean: d.exp_mean(),
            q025: d.quantile(0.025)?.exp(),
            q500: d.quantile(0.5)?.exp(),
            q975: d.quantile(0.975)?.exp(),
            distribution: Some(d),
        })
    }

    /// Closed 95% interval membership.
    pub fn covers(&self, truth: f64) -> bool {
        self.q025 <= truth && truth <= self.q975
    }
}

/// One predictive distribution per test row of `task`, in task units.
pub fn predict_distributions(ckpt: &ModelCheckpoint, task: &Task) -> Result<Vec<PredictiveDistribution>, ModelError> {
    let (enc, logits) = forward_task(&ckpt.model, &ckpt.bins, &ckpt.weights, task)?;
    (0..enc.n_test)
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            enc.grid.distribution(&row, enc.transform)
        })
        .collect()
}

/// One prediction per test row of `task`.
pub fn predict(ckpt: &ModelCheckpoint, task: &Task) -> Result<Vec<Prediction>, ModelError> {
    predict_distributions(ckpt, task)?.into_iter().map(|d| Ok(Prediction::from_distribution(d)?)).collect()
}

/// Like `predict_distributions`, but feeds the test rows in chunks of at
/// most `chunk`. Test rows never attend to one another, so the result is
/// the same as one pass; only the row count per pass is bounded.
pub fn predict_chunked(
    ckpt: &ModelCheckpoint,
    task: &Task,
    chunk: usize,
) -> Result<Vec<PredictiveDistribution>, ModelError> {
    if chunk == 0 {
        return Err(ModelError::Contract("chunk size must be positive".into()));
    }
    if task.n_test() <= chunk {
        return predict_distributions(ckpt, task);
    }
    let mut out = Vec::with_capacity(task.n_test());
    let rows: Vec<usize> = (0..task.n_test()).collect();
    for part in rows.chunks(chunk) {
        out.extend(predict_distributions(ckpt, &task.permute_test(part))?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow {
    row_id: usize,
    mean: f64,
    q025: f64,
    q500: f64,
    q975: f64,
}

/// CSV with columns `row_id,mean,q025,q500,q975`.
pub fn write_predictions_csv<W: io::Write>(out: W, predictions: &[Prediction]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for (row_id, p) in predictions.iter().enumerate() {
        w.serialize(CsvRow { row_id, mean: p.mean, q025: p.q025, q500: p.q500, q975: p.q975 })?;
    }
    w.flush()?;
    Ok(())
}

/// Full bin dump: one `{row_id, edges, masses, left_tail, right_tail}` object per row.
pub fn bins_json(predictions: &[Prediction]) -> serde_json::Value {
    serde_json::Value::Array(
        predictions
            .iter()
            .enumerate()
            .map(|(row_id, p)| serde_json::json!({ "row_id": row_id, "distribution": p.distribution }))
            .collect(),
    )
}
