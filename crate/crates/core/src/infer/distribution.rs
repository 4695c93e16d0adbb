use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::InferError;

fn std_normal() -> Normal {
    Normal::standard()
}

/// √(2/π): mean of a unit half-Normal.
const HALF_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

/// Piecewise-constant density over bins, optionally with half-Normal tails.
///
/// With `left_tail = Some(s)` the first bin is not `[e0, e1)` but the
/// half-Normal of scale `s` hanging below `e1`; likewise the last bin hangs
/// above `e[n-1]` when `right_tail` is set. The outer edge is then nominal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    edges: Vec<f64>,
    masses: Vec<f64>,
    left_tail: Option<f64>,
    right_tail: Option<f64>,
}

impl PredictiveDistribution {
    pub fn new(
        edges: Vec<f64>,
        masses: Vec<f64>,
        left_tail: Option<f64>,
        right_tail: Option<f64>,
    ) -> Result<Self, InferError> {
        let n = masses.len();
        if n == 0 || edges.len() != n + 1 {
            return Err(InferError::Contract(format!("{} edges for {} bins", edges.len(), n)));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(InferError::Contract("bin edges must be finite and strictly increasing".into()));
        }
        if masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(InferError::Contract("bin masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(InferError::Contract(format!("bin masses sum to {total}")));
        }
        for s in [left_tail, right_tail].into_iter().flatten() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(InferError::Contract(format!("tail scale {s} must be positive")));
            }
        }
        if n == 1 && left_tail.is_some() && right_tail.is_some() {
            return Err(InferError::Contract("a single bin cannot carry both tails".into()));
        }
        Ok(Self { edges, masses, left_tail, right_tail })
    }

    /// Equal-width bins over `[lo, hi]` with the given masses and no tails.
    pub fn uniform_bins(lo: f64, hi: f64, masses: Vec<f64>) -> Result<Self, InferError> {
        let n = masses.len();
        let edges = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        Self::new(edges, masses, None, None)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn left_tail(&self) -> Option<f64> {
        self.left_tail
    }

    pub fn right_tail(&self) -> Option<f64> {
        self.right_tail
    }

    pub fn n_bins(&self) -> usize {
        self.masses.len()
    }

    fn last(&self) -> usize {
        self.masses.len() - 1
    }

    /// Lower and upper limit of the support (infinite on a tailed side).
    pub fn support(&self) -> (f64, f64) {
        let lo = if self.left_tail.is_some() { f64::NEG_INFINITY } else { self.edges[0] };
        let hi = if self.right_tail.is_some() { f64::INFINITY } else { self.edges[self.edges.len() - 1] };
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        let last = self.last();
        self.masses
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let centroid = match (k, self.left_tail, self.right_tail) {
                    (0, Some(s), _) => self.edges[1] - s * HALF_NORMAL_MEAN,
                    (k, _, Some(s)) if k == last => self.edges[last] + s * HALF_NORMAL_MEAN,
                    _ => 0.5 * (self.edges[k] + self.edges[k + 1]),
                };
                m * centroid
            })
            .sum()
    }

    /// `E[exp(Y)]`: the mean on the original scale when the distribution is
    /// over a log-transformed quantity.
    pub fn exp_mean(&self) -> f64 {
        let last = self.last();
        let tail = |s: f64, upper: bool| {
            let p = std_normal().cdf(if upper { s } else { -s });
            2.0 * (0.5 * s * s).exp() * p
        };
        self.masses
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(k, &m)| {
                let e = &self.edges;
                let v = match (k, self.left_tail, self.right_tail) {
                    (0, Some(s), _) => e[1].exp() * tail(s, false),
                    (k, _, Some(s)) if k == last => e[last].exp() * tail(s, true),
                    _ => {
                        let w = e[k + 1] - e[k];
                        e[k].exp() * w.exp_m1() / w
                    }
                };
                m * v
            })
            .sum()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        let last = self.last();
        if let Some(s) = self.left_tail {
            if y < self.edges[1] {
                return self.masses[0] * 2.0 * std_normal().pdf((self.edges[1] - y) / s) / s;
            }
        }
        if let Some(s) = self.right_tail {
            if y >= self.edges[last] {
                return self.masses[last] * 2.0 * std_normal().pdf((y - self.edges[last]) / s) / s;
            }
        }
        match self.locate(y) {
            Some(k) => self.masses[k] / (self.edges[k + 1] - self.edges[k]),
            None => 0.0,
        }
    }

    pub fn log_density(&self, y: f64) -> f64 {
        self.pdf(y).ln()
    }

    /// Bin whose half-open interval `[e_k, e_{k+1})` holds `y`; the last
    /// bin also holds its upper edge.
    fn locate(&self, y: f64) -> Option<usize> {
        let n = self.masses.len();
        if y < self.edges[0] || y > self.edges[n] {
            return None;
        }
        let k = self.edges.partition_point(|&e| e <= y);
        Some(k.saturating_sub(1).min(n - 1))
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let last = self.last();
        let phi = std_normal();
        if let Some(s) = self.left_tail {
            if y < self.edges[1] {
                return self.masses[0] * 2.0 * phi.cdf((y - self.edges[1]) / s);
            }
        }
        if let Some(s) = self.right_tail {
            if y >= self.edges[last] {
                let below: f64 = self.masses[..last].iter().sum();
                return below + self.masses[last] * (2.0 * phi.cdf((y - self.edges[last]) / s) - 1.0);
            }
        }
        match self.locate(y) {
            None if y < self.edges[0] => 0.0,
            None => 1.0,
            Some(k) => {
                let below: f64 = self.masses[..k].iter().sum();
                let frac = (y - self.edges[k]) / (self.edges[k + 1] - self.edges[k]);
                (below + self.masses[k] * frac).min(1.0)
            }
        }
    }

    /// Inverse CDF, linear within bounded bins.
    pub fn quantile(&self, p: f64) -> Result<f64, InferError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(InferError::Probability(p));
        }
        let last = self.last();
        let phi = std_normal();
        let mut below = 0.0;
        for (k, &m) in self.masses.iter().enumerate() {
            let above = below + m;
            if p <= above && m > 0.0 || k == last {
                let m = m.max(f64::MIN_POSITIVE);
                let inner = ((p - below) / m).clamp(0.0, 1.0);
                return Ok(match (k, self.left_tail, self.right_tail) {
                    (0, Some(s), _) => self.edges[1] + s * phi.inverse_cdf((inner / 2.0).max(f64::MIN_POSITIVE)),
                    (k, _, Some(s)) if k == last => {
                        self.edges[last] + s * phi.inverse_cdf(((1.0 + inner) / 2.0).min(1.0 - 1e-16))
                    }
                    _ => self.edges[k] + inner * (self.edges[k + 1] - self.edges[k]),
                });
            }
            below = above;
        }
        unreachable!("last bin always returns")
    }

    /// Image under `y ↦ a·y + b` with `a > 0`.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self, InferError> {
        if !(a > 0.0) {
            return Err(InferError::Contract(format!("affine scale {a} must be positive")));
        }
        Ok(Self {
            edges: self.edges.iter().map(|e| a * e + b).collect(),
            masses: self.masses.clone(),
            left_tail: self.left_tail.map(|s| a * s),
            right_tail: self.right_tail.map(|s| a * s),
        })
    }
}
