//! Synthetic task generation: the meta-training distribution for the network.
//!
//! The default family draws tasks from random structural causal models; a
//! conjugate Normal family exists because its posterior predictive is known
//! in closed form, which makes it a calibration oracle.

mod scm;
mod task;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use task::{FeatureKind, FeatureMatrix, Task};

/// Attempts before a degenerate (constant-target) draw becomes an error.
pub const MAX_RESAMPLES: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid prior config: {0}")]
    InvalidConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate task: target constant after {attempts} draws")]
    Degenerate { attempts: usize },
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

/// Closed real interval; `min == max` is allowed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealRange {
    pub min: f64,
    pub max: f64,
}

impl RealRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Relative frequency of each edge mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismMix {
    pub linear: f64,
    pub mlp: f64,
    pub piecewise: f64,
}

impl MechanismMix {
    pub const LINEAR_ONLY: Self = Self { linear: 1.0, mlp: 0.0, piecewise: 0.0 };
}

impl Default for MechanismMix {
    fn default() -> Self {
        Self { linear: 0.5, mlp: 0.35, piecewise: 0.15 }
    }
}

/// Normal-Normal model with known observation variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePrior {
    pub mu0: f64,
    pub tau0_sq: f64,
    pub sigma_sq: f64,
    pub n_train: IntRange,
    pub n_test: usize,
}

impl Default for ConjugatePrior {
    fn default() -> Self {
        Self { mu0: 0.0, tau0_sq: 1.0, sigma_sq: 1.0, n_train: IntRange::new(1, 24), n_test: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorFamily {
    Scm,
    Conjugate(ConjugatePrior),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub family: PriorFamily,
    pub min_features: usize,
    pub max_features: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    /// Node count of the random causal graph (before widening to fit the features).
    pub dag_nodes: IntRange,
    /// Hidden width of the random-MLP edge mechanism.
    pub hidden_width: IntRange,
    /// Internal-node and observation noise, relative to unit-variance signals.
    pub noise_scale: RealRange,
    pub missing_input_rate: RealRange,
    pub categorical_feature_rate: f64,
    /// Chance that a task's rows come in groups sharing some root values and a target offset.
    #[serde(default)]
    pub grouped_row_rate: f64,
    pub mechanism_mix: MechanismMix,
    /// Fraction of rows placed in the training split.
    pub train_fraction: RealRange,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            family: PriorFamily::Scm,
            min_features: 1,
            max_features: 12,
            min_rows: 16,
            max_rows: 96,
            dag_nodes: IntRange::new(2, 12),
            hidden_width: IntRange::new(4, 16),
            noise_scale: RealRange::new(0.02, 0.6),
            missing_input_rate: RealRange::new(0.0, 0.3),
            categorical_feature_rate: 0.1,
            grouped_row_rate: 0.0,
            mechanism_mix: MechanismMix::default(),
            train_fraction: RealRange::new(0.5, 0.9),
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn conjugate(prior: ConjugatePrior, seed: u64) -> Self {
        Self { family: PriorFamily::Conjugate(prior), seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: String| Err(PriorError::InvalidConfig(m));
        if let PriorFamily::Conjugate(c) = &self.family {
            if !(c.tau0_sq > 0.0 && c.sigma_sq > 0.0) || !c.mu0.is_finite() {
                return bad("conjugate variances must be positive".into());
            }
            if c.n_train.min < 1 || c.n_train.min > c.n_train.max || c.n_test < 1 {
                return bad("conjugate task needs n_train ≥ 1 and n_test ≥ 1".into());
            }
            return Ok(());
        }
        if self.min_features < 1 || self.min_features > self.max_features {
            return bad(format!("feature range {}..={}", self.min_features, self.max_features));
        }
        if self.min_rows < 3 || self.min_rows > self.max_rows {
            return bad(format!("row range {}..={} (need at least 3 rows)", self.min_rows, self.max_rows));
        }
        if self.dag_nodes.min < 2 || self.dag_nodes.min > self.dag_nodes.max {
            return bad("dag_nodes range".into());
        }
        if self.hidden_width.min < 1 || self.hidden_width.min > self.hidden_width.max {
            return bad("hidden_width range".into());
        }
        let r = self.noise_scale;
        if !(r.min >= 0.0 && r.min <= r.max && r.max.is_finite()) {
            return bad("noise_scale range".into());
        }
        let m = self.missing_input_rate;
        if !(m.min >= 0.0 && m.min <= m.max && m.max < 1.0) {
            return bad("missing_input_rate must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.categorical_feature_rate) {
            return bad("categorical_feature_rate must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.grouped_row_rate) {
            return bad("grouped_row_rate must lie in [0, 1]".into());
        }
        let t = self.train_fraction;
        if !(t.min > 0.0 && t.min <= t.max && t.max < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        let mix = self.mechanism_mix;
        let parts = [mix.linear, mix.mlp, mix.piecewise];
        if parts.iter().any(|w| !(*w >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mechanism mix weights must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PriorError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Independent random stream for task `index` under `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw one task from the configured family.
pub fn sample_task<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Result<Task, PriorError> {
    cfg.validate()?;
    match &cfg.family {
        PriorFamily::Scm => scm::sample(cfg, rng),
        PriorFamily::Conjugate(c) => {
            let n_train = c.n_train.sample(rng);
            sample_conjugate_task(c.mu0, c.tau0_sq, c.sigma_sq, n_train, c.n_test, rng)
        }
    }
}

/// Task `index` of the stream defined by `cfg.seed`.
pub fn sample_task_at(cfg: &PriorConfig, index: u64) -> Result<Task, PriorError> {
    sample_task(cfg, &mut task_rng(cfg.seed, index))
}

/// Featureless task: `m ~ N(mu0, tau0²)`, `y ~ N(m, sigma²)`.
pub fn sample_conjugate_task<R: Rng + ?Sized>(
    mu0: f64,
    tau0_sq: f64,
    sigma_sq: f64,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<Task, PriorError> {
    if n_train < 1 {
        return Err(PriorError::Contract("conjugate task needs at least one training row".into()));
    }
    if !(tau0_sq > 0.0 && sigma_sq > 0.0) {
        return Err(PriorError::Contract("conjugate variances must be positive".into()));
    }
    let latent = Normal::new(mu0, tau0_sq.sqrt()).expect("finite").sample(rng);
    let obs = Normal::new(latent, sigma_sq.sqrt()).expect("finite");
    let y_train: Vec<f64> = (0..n_train).map(|_| obs.sample(rng)).collect();
    let y_test: Vec<f64> = (0..n_test).map(|_| obs.sample(rng)).collect();
    Task::new(
        FeatureMatrix::featureless(n_train),
        y_train,
        FeatureMatrix::featureless(n_test),
        Some(y_test),
        Vec::new(),
    )
}

/// Closed-form posterior predictive of the conjugate family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalPredictive {
    pub mean: f64,
    pub var: f64,
}

impl NormalPredictive {
    pub fn quantile(&self, p: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal as SNormal};
        SNormal::new(self.mean, self.var.sqrt()).expect("positive variance").inverse_cdf(p)
    }

    pub fn log_density(&self, y: f64) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * self.var).ln() + (y - self.mean).powi(2) / self.var)
    }
}

pub fn conjugate_predictive(mu0: f64, tau0_sq: f64, sigma_sq: f64, y_train: &[f64]) -> NormalPredictive {
    if tau0_sq <= 0.0 {
        return NormalPredictive { mean: mu0, var: sigma_sq };
    }
    let n = y_train.len() as f64;
    let precision = 1.0 / tau0_sq + n / sigma_sq;
    let post_var = 1.0 / precision;
    let mean = post_var * (mu0 / tau0_sq + y_train.iter().sum::<f64>() / sigma_sq);
    NormalPredictive { mean, var: post_var + sigma_sq }
}
