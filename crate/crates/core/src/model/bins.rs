use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::ModelError;
use crate::infer::PredictiveDistribution;

/// How target bins are laid out for a task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinStrategy {
    /// Targets are standardized by the training mean and standard deviation,
    /// then binned by edges that blend the empirical training quantiles with
    /// standard-Normal quantiles. Interior edges stay inside [-4, 4].
    EqualMass,
    /// Raw target units, `n_bins` equal-width bins over `[lo, hi]`.
    Fixed { lo: f64, hi: f64 },
}

impl BinStrategy {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            Self::EqualMass => Ok(()),
            Self::Fixed { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            Self::Fixed { lo, hi } => Err(ModelError::InvalidConfig(format!("fixed bins need lo < hi, got [{lo}, {hi}]"))),
        }
    }
}

/// Maps standardized targets back to task units: `y = shift + scale·z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    pub shift: f64,
    pub scale: f64,
}

impl TargetTransform {
    pub const IDENTITY: Self = Self { shift: 0.0, scale: 1.0 };

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.shift + self.scale * z
    }
}

/// Concrete bin edges for one task, in standardized units. The first and
/// last bins are half-Normal tails hanging off `edges[1]` and `edges[n-1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub edges: Vec<f64>,
    pub left_tail: f64,
    pub right_tail: f64,
}

const EDGE_LIMIT: f64 = 4.0;
const TAIL_FLOOR: f64 = 0.5;

/// Linear-interpolated empirical quantile of sorted data.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BinGrid {
    fn with_tails(edges: Vec<f64>) -> Self {
        let n = edges.len() - 1;
        let left_tail = (edges[2] - edges[1]).max(TAIL_FLOOR);
        let right_tail = (edges[n - 1] - edges[n - 2]).max(TAIL_FLOOR);
        Self { edges, left_tail, right_tail }
    }

    /// Blend of empirical and standard-Normal equal-mass edges for
    /// standardized training targets `z_train`.
    pub fn equal_mass(z_train: &[f64], n_bins: usize) -> Self {
        let mut sorted: Vec<f64> = z_train.to_vec();
        sorted.sort_by(f64::total_cmp);
        let normal = Normal::standard();
        let mut edges = Vec::with_capacity(n_bins + 1);
        edges.push(-EDGE_LIMIT);
        for i in 1..n_bins {
            let p = i as f64 / n_bins as f64;
            let empirical = if sorted.is_empty() { 0.0 } else { empirical_quantile(&sorted, p) };
            edges.push(0.5 * empirical.clamp(-3.9, 3.9) + 0.5 * normal.inverse_cdf(p));
        }
        edges.push(EDGE_LIMIT);
        Self::with_tails(edges)
    }

    pub fn fixed(lo: f64, hi: f64, n_bins: usize) -> Self {
        Self::with_tails((0..=n_bins).map(|i| lo + (hi - lo) * i as f64 / n_bins as f64).collect())
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin holding `z` (tails catch everything outside the interior edges).
    pub fn locate(&self, z: f64) -> usize {
        let n = self.n_bins();
        let k = self.edges[1..n].partition_point(|&e| e <= z);
        k.min(n - 1)
    }

    /// `log(density / mass)` at `z` for the bin that holds it, so the bar
    /// log-density is `log(mass) + shape_log_density(z)`.
    pub fn shape_log_density(&self, z: f64) -> (usize, f64) {
        let k = self.locate(z);
        let n = self.n_bins();
        let half_normal = |d: f64, s: f64| (2.0 / (s * (2.0 * std::f64::consts::PI).sqrt())).ln() - 0.5 * (d / s).powi(2);
        let shape = if k == 0 {
            half_normal(self.edges[1] - z, self.left_tail)
        } else if k == n - 1 {
            half_normal(z - self.edges[n - 1], self.right_tail)
        } else {
            -(self.edges[k + 1] - self.edges[k]).ln()
        };
        (k, shape)
    }

    /// Bar distribution in task units for one row of logits.
    pub fn distribution(&self, logits: &[f64], transform: TargetTransform) -> Result<PredictiveDistribution, ModelError> {
        logits_to_distribution(logits, &self.edges, Some((self.left_tail, self.right_tail)), transform)
    }
}

/// Softmax `logits` into bin masses over `edges` (standardized units), then
/// map to task units with `transform`. `tails`, when set, turns the outer
/// bins into half-Normal tails with the given standardized scales.
pub fn logits_to_distribution(
    logits: &[f64],
    edges: &[f64],
    tails: Option<(f64, f64)>,
    transform: TargetTransform,
) -> Result<PredictiveDistribution, ModelError> {
    if edges.len() != logits.len() + 1 {
        return Err(ModelError::Contract(format!("{} edges for {} logits", edges.len(), logits.len())));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ModelError::Contract("bin edges must be strictly increasing".into()));
    }
    if !(transform.scale > 0.0) {
        return Err(ModelError::Contract(format!("target scale {} must be positive", transform.scale)));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let masses: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let a = transform.scale;
    let dist = PredictiveDistribution::new(
        edges.iter().map(|&e| transform.inverse(e)).collect(),
        masses,
        tails.map(|(l, _)| a * l),
        tails.map(|(_, r)| a * r),
    )?;
    Ok(dist)
}
