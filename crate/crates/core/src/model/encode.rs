use std::sync::Arc;

use super::bins::{BinGrid, BinStrategy, TargetTransform};
use super::{ModelConfig, ModelError};
use crate::numcore::{AttentionGroup, AttentionLayout, Tensor};
use crate::prior::Task;

/// Width of the raw per-cell input vector.
pub const CELL_INPUTS: usize = 6;

const INPUT_CLAMP: f64 = 10.0;

/// A task turned into network inputs. Built from `x_train`, `y_train` and
/// `x_test` only.
#[derive(Clone, Debug)]
pub struct EncodedTask {
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    /// `[cells × CELL_INPUTS]`, cell `r·(F+1) + c`, target column last.
    pub cells: Tensor<f64>,
    pub transform: TargetTransform,
    pub grid: BinGrid,
    pub row_layout: Arc<AttentionLayout>,
    pub col_layout: Arc<AttentionLayout>,
    /// Cell index of each test row's target cell.
    pub head_cells: Vec<usize>,
}

impl EncodedTask {
    pub fn n_cols(&self) -> usize {
        self.n_features + 1
    }

    pub fn n_cells(&self) -> usize {
        (self.n_train + self.n_test) * self.n_cols()
    }

    /// Bin index and bar log-density offset of each value, in task units.
    pub fn targets(&self, y: &[f64]) -> (Vec<usize>, Vec<f64>) {
        y.iter().map(|&v| self.grid.shape_log_density(self.transform.forward(v))).unzip()
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 })
}

pub fn check_capacity(cfg: &ModelConfig, task: &Task) -> Result<(), ModelError> {
    task.validate()?;
    if task.n_features() > cfg.max_features {
        return Err(ModelError::Capacity { bound: "max_features", limit: cfg.max_features, actual: task.n_features() });
    }
    let rows = task.n_train() + task.n_test();
    if rows > cfg.max_rows {
        return Err(ModelError::Capacity { bound: "max_rows", limit: cfg.max_rows, actual: rows });
    }
    if task.n_train() == 0 {
        return Err(ModelError::EmptyContext);
    }
    if task.y_train.iter().any(|y| !y.is_finite()) {
        return Err(ModelError::Contract("training targets must be finite".into()));
    }
    Ok(())
}

pub fn encode(cfg: &ModelConfig, bins: &BinStrategy, task: &Task) -> Result<EncodedTask, ModelError> {
    check_capacity(cfg, task)?;
    let (n_train, n_test, f) = (task.n_train(), task.n_test(), task.n_features());
    let c = f + 1;
    let rows = n_train + n_test;

    let transform = match bins {
        BinStrategy::EqualMass => {
            let (shift, scale) = mean_sd(&task.y_train);
            TargetTransform { shift, scale }
        }
        BinStrategy::Fixed { .. } => TargetTransform::IDENTITY,
    };
    let z_train: Vec<f64> = task.y_train.iter().map(|&y| transform.forward(y)).collect();
    let grid = match *bins {
        BinStrategy::EqualMass => BinGrid::equal_mass(&z_train, cfg.n_bins),
        BinStrategy::Fixed { lo, hi } => BinGrid::fixed(lo, hi, cfg.n_bins),
    };

    let stats: Vec<(f64, f64)> = (0..f)
        .map(|j| {
            let observed: Vec<f64> = (0..n_train).filter_map(|r| task.x_train.get(r, j)).collect();
            mean_sd(&observed)
        })
        .collect();

    let mut cells = vec![0.0; rows * c * CELL_INPUTS];
    for r in 0..rows {
        let (x, local) = if r < n_train { (&task.x_train, r) } else { (&task.x_test, r - n_train) };
        for (j, &(mean, sd)) in stats.iter().enumerate() {
            let u = &mut cells[(r * c + j) * CELL_INPUTS..(r * c + j + 1) * CELL_INPUTS];
            match x.get(local, j) {
                Some(v) => u[0] = ((v - mean) / sd).clamp(-INPUT_CLAMP, INPUT_CLAMP),
                None => u[1] = 1.0,
            }
            u[2] = 1.0;
        }
        let u = &mut cells[(r * c + f) * CELL_INPUTS..(r * c + c) * CELL_INPUTS];
        if r < n_train {
            u[3] = z_train[r].clamp(-INPUT_CLAMP, INPUT_CLAMP);
            u[4] = 1.0;
        } else {
            u[5] = 1.0;
        }
    }

    let row_layout = AttentionLayout {
        groups: (0..rows)
            .map(|r| AttentionGroup { members: (r * c..(r + 1) * c).collect(), key_ok: vec![true; c] })
            .collect(),
    };
    // Columns only expose training rows as keys, so test rows never see each
    // other and never see a test target cell.
    let col_layout = AttentionLayout {
        groups: (0..c)
            .map(|j| AttentionGroup {
                members: (0..rows).map(|r| r * c + j).collect(),
                key_ok: (0..rows).map(|r| r < n_train).collect(),
            })
            .collect(),
    };

    Ok(EncodedTask {
        n_train,
        n_test,
        n_features: f,
        cells: Tensor::new(vec![rows * c, CELL_INPUTS], cells)?,
        transform,
        grid,
        row_layout: Arc::new(row_layout),
        col_layout: Arc::new(col_layout),
        head_cells: (n_train..rows).map(|r| r * c + f).collect(),
    })
}
