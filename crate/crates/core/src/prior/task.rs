use serde::{Deserialize, Serialize};

use super::PriorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    /// Integer-coded category, embedded like a continuous value.
    Categorical,
}

/// Row-major feature values with a per-cell missing mask.
///
/// Values under a set mask bit are ignored by every consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, missing: Vec<bool>) -> Result<Self, PriorError> {
        if values.len() != rows * cols || missing.len() != rows * cols {
            return Err(PriorError::Contract(format!(
                "feature matrix {}×{} needs {} cells, got {} values / {} mask bits",
                rows,
                cols,
                rows * cols,
                values.len(),
                missing.len()
            )));
        }
        Ok(Self { rows, cols, values, missing })
    }

    /// A fully observed matrix.
    pub fn dense(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, PriorError> {
        let n = values.len();
        Self::new(rows, cols, values, vec![false; n])
    }

    pub fn empty(cols: usize) -> Self {
        Self { rows: 0, cols, values: Vec::new(), missing: Vec::new() }
    }

    /// `rows` rows with no feature columns.
    pub fn featureless(rows: usize) -> Self {
        Self { rows, cols: 0, values: Vec::new(), missing: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn is_missing(&self, r: usize, c: usize) -> bool {
        self.missing[r * self.cols + c]
    }

    /// `Some(value)` when observed.
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        (!self.is_missing(r, c)).then(|| self.value(r, c))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn push_row(&mut self, row: &[Option<f64>]) -> Result<(), PriorError> {
        if row.len() != self.cols {
            return Err(PriorError::Contract(format!("row has {} cells, expected {}", row.len(), self.cols)));
        }
        for cell in row {
            self.values.push(cell.unwrap_or(0.0));
            self.missing.push(cell.is_none());
        }
        self.rows += 1;
        Ok(())
    }

    pub fn row_cells(&self, r: usize) -> Vec<Option<f64>> {
        (0..self.cols).map(|c| self.get(r, c)).collect()
    }

    /// New matrix whose row `i` is row `order[i]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let mut out = Self::empty(self.cols);
        for &r in order {
            out.values.extend_from_slice(&self.values[r * self.cols..(r + 1) * self.cols]);
            out.missing.extend_from_slice(&self.missing[r * self.cols..(r + 1) * self.cols]);
            out.rows += 1;
        }
        out
    }

    /// New matrix whose column `j` is column `order[j]` of `self`.
    pub fn select_cols(&self, order: &[usize]) -> Self {
        let mut out = Self { rows: self.rows, cols: order.len(), values: Vec::new(), missing: Vec::new() };
        for r in 0..self.rows {
            for &c in order {
                out.values.push(self.value(r, c));
                out.missing.push(self.is_missing(r, c));
            }
        }
        out
    }
}

/// One in-context episode: labelled training rows plus query rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub x_train: FeatureMatrix,
    pub y_train: Vec<f64>,
    pub x_test: FeatureMatrix,
    /// Held-out truths; never read by the network.
    pub y_test: Option<Vec<f64>>,
    pub schema: Vec<FeatureKind>,
}

impl Task {
    pub fn new(
        x_train: FeatureMatrix,
        y_train: Vec<f64>,
        x_test: FeatureMatrix,
        y_test: Option<Vec<f64>>,
        schema: Vec<FeatureKind>,
    ) -> Result<Self, PriorError> {
        let task = Self { x_train, y_train, x_test, y_test, schema };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        if self.x_train.cols() != self.x_test.cols() {
            return Err(PriorError::Contract(format!(
                "train has {} features, test has {}",
                self.x_train.cols(),
                self.x_test.cols()
            )));
        }
        if self.schema.len() != self.x_train.cols() {
            return Err(PriorError::Contract(format!(
                "schema lists {} features, matrices have {}",
                self.schema.len(),
                self.x_train.cols()
            )));
        }
        if self.y_train.len() != self.x_train.rows() {
            return Err(PriorError::Contract(format!(
                "{} train targets for {} train rows",
                self.y_train.len(),
                self.x_train.rows()
            )));
        }
        if let Some(y) = &self.y_test {
            if y.len() != self.x_test.rows() {
                return Err(PriorError::Contract(format!(
                    "{} test targets for {} test rows",
                    y.len(),
                    self.x_test.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.x_train.rows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x_train.cols()
    }

    /// Same task with training rows reordered by `order`.
    pub fn permute_train(&self, order: &[usize]) -> Self {
        Self {
            x_train: self.x_train.select_rows(order),
            y_train: order.iter().map(|&i| self.y_train[i]).collect(),
            ..self.clone()
        }
    }

    /// Same task with test rows reordered by `order`.
    pub fn permute_test(&self, order: &[usize]) -> Self {
        Self {
            x_test: self.x_test.select_rows(order),
            y_test: self.y_test.as_ref().map(|y| order.iter().map(|&i| y[i]).collect()),
            ..self.clone()
        }
    }

    /// Same task with feature columns reordered by `order`.
    pub fn permute_features(&self, order: &[usize]) -> Self {
        Self {
            x_train: self.x_train.select_cols(order),
            x_test: self.x_test.select_cols(order),
            schema: order.iter().map(|&j| self.schema[j]).collect(),
            ..self.clone()
        }
    }
}
