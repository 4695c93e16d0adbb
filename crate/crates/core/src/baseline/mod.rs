//! Hierarchical Bayesian baseline: a log-linear depth trend with
//! borehole-level random intercepts, fitted by conjugate Gibbs sampling.
//!
//! `ln y_ij = β0 + β1·depth_ij + u_j + ε_ij`, `u_j ~ N(0, τ²)`,
//! `ε_ij ~ N(0, σ²)`, Normal priors on β and inverse-gamma priors on the
//! variances. One target at a time.

use std::collections::{BTreeMap, HashMap};
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{BoreholeRecord, Param};
use crate::infer::Prediction;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid HBM spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 2 boreholes with observed {target}, found {found}")]
    TooFewBoreholes { target: Param, found: usize },
    #[error("degenerate data: observed {0} has zero variance")]
    Degenerate(Param),
    #[error("non-finite draw at iteration {iteration} of chain {chain}")]
    NonFinite { chain: usize, iteration: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Inverse-gamma prior `IG(shape, scale)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HBMSpec {
    /// Prior mean of (intercept at the mean training depth, slope per metre).
    pub beta_mean: [f64; 2],
    pub beta_sd: [f64; 2],
    pub noise_prior: InvGamma,
    pub effect_prior: InvGamma,
    pub burn_in: usize,
    /// Kept draws per chain.
    pub draws: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Holds σ² fixed instead of sampling it.
    pub pin_noise_var: Option<f64>,
    /// Holds τ² fixed instead of sampling it.
    pub pin_effect_var: Option<f64>,
}

impl Default for HBMSpec {
    fn default() -> Self {
        Self {
            beta_mean: [0.0, 0.0],
            beta_sd: [10.0, 1.0],
            noise_prior: InvGamma { shape: 1.0, scale: 0.01 },
            effect_prior: InvGamma { shape: 1.0, scale: 0.01 },
            burn_in: 500,
            draws: 1000,
            thin: 1,
            chains: 2,
            seed: 0,
            pin_noise_var: None,
            pin_effect_var: None,
        }
    }
}

impl HBMSpec {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::InvalidSpec(m.to_string()));
        if self.draws < 100 {
            return bad("kept draws must be at least 100");
        }
        if self.thin == 0 || self.chains == 0 {
            return bad("thin and chains must be at least 1");
        }
        if !self.beta_sd.iter().all(|s| *s > 0.0 && s.is_finite()) || !self.beta_mean.iter().all(|m| m.is_finite()) {
            return bad("trend prior needs finite means and positive scales");
        }
        for g in [self.noise_prior, self.effect_prior] {
            if !(g.shape > 0.0 && g.scale > 0.0) {
                return bad("inverse-gamma priors need positive shape and scale");
            }
        }
        for v in [self.pin_noise_var, self.pin_effect_var].into_iter().flatten() {
            if !(v > 0.0) || !v.is_finite() {
                return bad("pinned variances must be positive");
            }
        }
        Ok(())
    }
}

/// Observations grouped by borehole, in a canonical borehole order that
/// depends only on the data, never on the labels.
#[derive(Clone, Debug)]
pub struct Groups {
    /// Depth (centred) and log-target per observation.
    pub obs: Vec<(f64, f64)>,
    /// Borehole index of each observation.
    pub group: Vec<usize>,
    pub n_groups: usize,
    pub depth_center: f64,
}

impl Groups {
    fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_groups];
        self.group.iter().for_each(|&g| c[g] += 1);
        c
    }
}

/// Normal `N(mean, cov)` over (β0, β1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BivariateNormal {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// β | u, σ².
pub fn conditional_beta(spec: &HBMSpec, g: &Groups, u: &[f64], noise_var: f64) -> BivariateNormal {
    let mut p = [[1.0 / spec.beta_sd[0].powi(2), 0.0], [0.0, 1.0 / spec.beta_sd[1].powi(2)]];
    let mut h = [spec.beta_mean[0] * p[0][0], spec.beta_mean[1] * p[1][1]];
    for (&(d, y), &j) in g.obs.iter().zip(&g.group) {
        let r = y - u[j];
        p[0][0] += 1.0 / noise_var;
        p[0][1] += d / noise_var;
        p[1][1] += d * d / noise_var;
        h[0] += r / noise_var;
        h[1] += d * r / noise_var;
    }
    p[1][0] = p[0][1];
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let cov = [[p[1][1] / det, -p[0][1] / det], [-p[1][0] / det, p[0][0] / det]];
    let mean = [cov[0][0] * h[0] + cov[0][1] * h[1], cov[1][0] * h[0] + cov[1][1] * h[1]];
    BivariateNormal { mean, cov }
}

/// (mean, variance) of each `u_j | β, σ², τ²`.
pub fn conditional_effects(g: &Groups, beta: [f64; 2], noise_var: f64, effect_var: f64) -> Vec<(f64, f64)> {
    let mut sums = vec![0.0; g.n_groups];
    for (&(d, y), &j) in g.obs.iter().zip(&g.group) {
        sums[j] += y - beta[0] - beta[1] * d;
    }
    g.counts()
        .iter()
        .zip(&sums)
        .map(|(&n, &s)| {
            let prec = n as f64 / noise_var + 1.0 / effect_var;
            (s / noise_var / prec, 1.0 / prec)
        })
        .collect()
}

/// σ² | β, u.
pub fn conditional_noise_var(spec: &HBMSpec, g: &Groups, beta: [f64; 2], u: &[f64]) -> InvGamma {
    let ssr: f64 = g.obs.iter().zip(&g.group).map(|(&(d, y), &j)| (y - beta[0] - beta[1] * d - u[j]).powi(2)).sum();
    InvGamma { shape: spec.noise_prior.shape + 0.5 * g.obs.len() as f64, scale: spec.noise_prior.scale + 0.5 * ssr }
}

/// τ² | u.
pub fn conditional_effect_var(spec: &HBMSpec, u: &[f64]) -> InvGamma {
    InvGamma {
        shape: spec.effect_prior.shape + 0.5 * u.len() as f64,
        scale: spec.effect_prior.scale + 0.5 * u.iter().map(|v| v * v).sum::<f64>(),
    }
}

fn sample_inv_gamma<R: Rng>(ig: InvGamma, rng: &mut R) -> f64 {
    let g = Gamma::new(ig.shape, 1.0 / ig.scale).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

fn sample_bivariate<R: Rng>(d: &BivariateNormal, rng: &mut R) -> [f64; 2] {
    let l00 = d.cov[0][0].sqrt();
    let l10 = d.cov[1][0] / l00;
    let l11 = (d.cov[1][1] - l10 * l10).max(0.0).sqrt();
    let (z0, z1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
    [d.mean[0] + l00 * z0, d.mean[1] + l10 * z0 + l11 * z1]
}

/// One kept Gibbs state. `beta` is in the centred parametrisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub beta: [f64; 2],
    pub noise_var: f64,
    pub effect_var: f64,
    pub effects: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Posterior {
    pub target: Param,
    pub spec: HBMSpec,
    pub depth_center: f64,
    /// Canonical group index per borehole id.
    pub boreholes: BTreeMap<String, usize>,
    /// `chains[c][k]`, merged in (chain, iteration) order.
    pub chains: Vec<Vec<Draw>>,
}

fn group_rows(rows: &[&BoreholeRecord], target: Param) -> Result<(Groups, BTreeMap<String, usize>), BaselineError> {
    let mut by_bh: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = r.get(target) {
            by_bh.entry(format!("{}\u{1f}{}", r.site_id, r.borehole_id)).or_default().push((r.depth, v.ln()));
        }
    }
    if by_bh.len() < 2 {
        return Err(BaselineError::TooFewBoreholes { target, found: by_bh.len() });
    }
    // Order boreholes by their sorted observations so labels never matter.
    let mut keyed: Vec<(Vec<(u64, u64)>, String, Vec<(f64, f64)>)> = by_bh
        .into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            (obs.iter().map(|(d, y)| (d.to_bits(), y.to_bits())).collect(), id, obs)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));

    let all: Vec<f64> = keyed.iter().flat_map(|k| k.2.iter().map(|o| o.1)).collect();
    let mean_y = all.iter().sum::<f64>() / all.len() as f64;
    if all.iter().all(|y| (y - mean_y).abs() <= 1e-12 * (1.0 + mean_y.abs())) {
        return Err(BaselineError::Degenerate(target));
    }
    let n = all.len() as f64;
    let depth_center = keyed.iter().flat_map(|k| k.2.iter().map(|o| o.0)).sum::<f64>() / n;

    let mut g = Groups { obs: Vec::new(), group: Vec::new(), n_groups: keyed.len(), depth_center };
    let mut index = BTreeMap::new();
    for (j, (_, id, obs)) in keyed.into_iter().enumerate() {
        for (d, y) in obs {
            g.obs.push((d - depth_center, y));
            g.group.push(j);
        }
        index.insert(id, j);
    }
    Ok((g, index))
}

fn run_chain(spec: &HBMSpec, g: &Groups, chain: usize) -> Result<Vec<Draw>, BaselineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(chain as u64);
    let mean_y = g.obs.iter().map(|o| o.1).sum::<f64>() / g.obs.len() as f64;
    let var_y = g.obs.iter().map(|o| (o.1 - mean_y).powi(2)).sum::<f64>() / g.obs.len() as f64;
    let mut u = vec![0.0; g.n_groups];
    let mut noise_var = spec.pin_noise_var.unwrap_or(var_y.max(1e-6));
    let mut effect_var = spec.pin_effect_var.unwrap_or(var_y.max(1e-6));
    let total = spec.burn_in + spec.draws * spec.thin;
    let mut kept = Vec::with_capacity(spec.draws);
    for it in 0..total {
        let beta = sample_bivariate(&conditional_beta(spec, g, &u, noise_var), &mut rng);
        for (uj, (m, v)) in u.iter_mut().zip(conditional_effects(g, beta, noise_var, effect_var)) {
            *uj = m + v.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        noise_var = match spec.pin_noise_var {
            Some(v) => v,
            None => sample_inv_gamma(conditional_noise_var(spec, g, beta, &u), &mut rng),
        };
        effect_var = match spec.pin_effect_var {
            Some(v) => v,
            None => sample_inv_gamma(conditional_effect_var(spec, &u), &mut rng),
        };
        if !(beta.iter().all(|b| b.is_finite()) && noise_var.is_finite() && effect_var.is_finite()) {
            return Err(BaselineError::NonFinite { chain, iteration: it });
        }
        if it >= spec.burn_in && (it - spec.burn_in) % spec.thin == 0 {
            kept.push(Draw { beta, noise_var, effect_var, effects: u.clone() });
        }
    }
    Ok(kept)
}

/// Runs `spec.chains` Gibbs chains on the rows with an observed `target`.
pub fn fit(spec: &HBMSpec, rows: &[&BoreholeRecord], target: Param) -> Result<Posterior, BaselineError> {
    spec.validate()?;
    let (g, boreholes) = group_rows(rows, target)?;
    let chains = (0..spec.chains).map(|c| run_chain(spec, &g, c)).collect::<Result<Vec<_>, _>>()?;
    Ok(Posterior { target, spec: spec.clone(), depth_center: g.depth_center, boreholes, chains })
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Potential scale reduction of one scalar across chains.
pub fn psrf(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let v = (n - 1.0) / n * w + b / n;
    (v / w).sqrt()
}

impl Posterior {
    pub fn draws(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flatten()
    }

    /// Intercept at depth zero and slope, per kept draw.
    pub fn trend(&self, d: &Draw) -> [f64; 2] {
        [d.beta[0] - d.beta[1] * self.depth_center, d.beta[1]]
    }

    pub fn mean_slope(&self) -> f64 {
        let (s, n) = self.draws().fold((0.0, 0usize), |(s, n), d| (s + d.beta[1], n + 1));
        s / n as f64
    }

    /// Named scalar traces, one vector per chain.
    pub fn traces(&self) -> Vec<(String, Vec<Vec<f64>>)> {
        let mut out: Vec<(String, Vec<Vec<f64>>)> = vec![
            ("beta0".into(), self.chains.iter().map(|c| c.iter().map(|d| self.trend(d)[0]).collect()).collect()),
            ("beta1".into(), self.chains.iter().map(|c| c.iter().map(|d| d.beta[1]).collect()).collect()),
            ("sigma_sq".into(), self.chains.iter().map(|c| c.iter().map(|d| d.noise_var).collect()).collect()),
            ("tau_sq".into(), self.chains.iter().map(|c| c.iter().map(|d| d.effect_var).collect()).collect()),
        ];
        let mut ids: Vec<(&String, &usize)> = self.boreholes.iter().collect();
        ids.sort_by_key(|(_, &j)| j);
        for (id, &j) in ids {
            let name = format!("u[{}]", id.replace('\u{1f}', "/"));
            out.push((name, self.chains.iter().map(|c| c.iter().map(|d| d.effects[j]).collect()).collect()));
        }
        out
    }

    /// PSRF of every traced scalar; needs at least two chains.
    pub fn psrf(&self) -> Vec<(String, f64)> {
        self.traces().into_iter().map(|(name, chains)| (name, psrf(&chains))).collect()
    }

    /// Posterior-predictive draws of `ln y` for one row. Unseen boreholes
    /// draw a fresh effect from `N(0, τ²)`.
    fn log_draws(&self, row: &BoreholeRecord, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let j = self.boreholes.get(&format!("{}\u{1f}{}", row.site_id, row.borehole_id)).copied();
        let d = row.depth - self.depth_center;
        self.draws()
            .map(|s| {
                let u = match j {
                    Some(j) => s.effects[j],
                    None => s.effect_var.sqrt() * rng.sample::<f64, _>(StandardNormal),
                };
                s.beta[0] + s.beta[1] * d + u + s.noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    /// Pooled posterior-predictive summaries of `y` (original units).
    pub fn predict(&self, rows: &[&BoreholeRecord]) -> Vec<Prediction> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
                rng.set_stream(1 << 32 | i as u64);
                let mut ys: Vec<f64> = self.log_draws(r, &mut rng).into_iter().map(f64::exp).collect();
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                ys.sort_by(f64::total_cmp);
                Prediction {
                    mean,
                    q025: empirical_quantile(&ys, 0.025),
                    q500: empirical_quantile(&ys, 0.5),
                    q975: empirical_quantile(&ys, 0.975),
                    distribution: None,
                }
            })
            .collect()
    }

    /// CSV: `chain,iteration,beta0,beta1,sigma_sq,tau_sq,u[...]...`.
    pub fn write_draws_csv<W: io::Write>(&self, out: W) -> Result<(), BaselineError> {
        let traces = self.traces();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(traces.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for k in 0..chain.len() {
                let mut row = vec![c.to_string(), k.to_string()];
                row.extend(traces.iter().map(|(_, t)| t[c][k].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Relabels borehole ids through `map` (ids absent from it are kept).
pub fn relabel(rows: &[BoreholeRecord], map: &HashMap<String, String>) -> Vec<BoreholeRecord> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(n) = map.get(&r.borehole_id) {
                r.borehole_id = n.clone();
            }
            r
        })
        .collect()
}
