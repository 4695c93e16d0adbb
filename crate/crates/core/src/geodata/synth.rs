use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{round_significant, BoreholeRecord, GeoError, Param, Region, SiteTable, N_PARAMS};
use crate::prior::IntRange;

const SIGNIFICANT_DIGITS: i32 = 9;
/// Plastic limit is held below this fraction of the liquid limit.
const PL_CAP: f64 = 0.95;

/// Log-space model of one parameter:
/// `intercept + slope·depth + log_depth·ln(1+depth) + spatial·field(x,y)
///  + borehole effect + loadings·factors + noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamModel {
    pub intercept: f64,
    pub slope: f64,
    pub log_depth: f64,
    pub spatial: f64,
    pub borehole_sd: f64,
    pub noise_sd: f64,
    pub missing_rate: f64,
}

impl ParamModel {
    pub fn trend(&self, depth: f64) -> f64 {
        self.intercept + self.slope * depth + self.log_depth * depth.ln_1p()
    }
}

/// Unit-variance smooth random field from random Fourier features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialField {
    pub length_scale: f64,
    pub n_waves: usize,
}

struct Field {
    waves: Vec<(f64, f64, f64)>,
    scale: f64,
}

impl Field {
    fn draw(spec: &SpatialField, rng: &mut ChaCha8Rng) -> Self {
        let omega = Normal::new(0.0, 1.0 / spec.length_scale).expect("validated length scale");
        let waves = (0..spec.n_waves)
            .map(|_| (omega.sample(rng), omega.sample(rng), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self { waves, scale: (2.0 / spec.n_waves.max(1) as f64).sqrt() }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.scale * self.waves.iter().map(|(wx, wy, phase)| (wx * x + wy * y + phase).cos()).sum::<f64>()
    }
}

/// Where boreholes go: `n_boreholes` placed uniformly in `region`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zone {
    pub region: Region,
    pub n_boreholes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSiteConfig {
    pub site_id: String,
    pub zones: Vec<Zone>,
    pub records_per_borehole: IntRange,
    pub top_depth: f64,
    pub depth_step: f64,
    /// Uniform jitter half-width around each nominal depth.
    pub depth_jitter: f64,
    /// In `Param::ALL` order.
    pub params: [ParamModel; N_PARAMS],
    /// `N_PARAMS` rows of `k` latent-factor loadings.
    pub loadings: Vec<Vec<f64>>,
    pub spatial: SpatialField,
    pub seed: u64,
}

/// Two factors: a strength/density factor and a plasticity factor.
pub const DEFAULT_LOADINGS: [[f64; 2]; N_PARAMS] = [
    [0.0, 0.0],
    [0.02, -0.01],
    [-0.08, 0.06],
    [0.0, 0.15],
    [0.0, 0.10],
    [-0.06, 0.08],
    [0.15, 0.02],
    [0.18, 0.0],
    [0.15, 0.0],
    [-0.05, 0.12],
    [0.05, -0.20],
];

const fn pm(intercept: f64, slope: f64, log_depth: f64, spatial: f64, borehole_sd: f64, noise_sd: f64, missing_rate: f64) -> ParamModel {
    ParamModel { intercept, slope, log_depth, spatial, borehole_sd, noise_sd, missing_rate }
}

/// Soft-clay defaults: index properties nearly always present, mechanical
/// properties sparse and rising with depth.
pub const DEFAULT_PARAMS: [ParamModel; N_PARAMS] = [
    pm(4.575, 0.0, 0.0, 0.005, 0.005, 0.01, 0.05),
    pm(2.741, 0.002, 0.0, 0.01, 0.01, 0.02, 0.05),
    pm(0.875, -0.004, -0.05, 0.05, 0.05, 0.06, 0.08),
    pm(4.317, 0.0, 0.0, 0.08, 0.08, 0.10, 0.08),
    pm(3.466, 0.0, 0.0, 0.05, 0.05, 0.08, 0.08),
    pm(4.382, -0.004, -0.03, 0.05, 0.05, 0.06, 0.05),
    pm(2.485, 0.012, 0.35, 0.15, 0.12, 0.10, 0.45),
    pm(7.313, 0.012, 0.35, 0.15, 0.15, 0.15, 0.70),
    pm(3.689, 0.012, 0.35, 0.15, 0.12, 0.12, 0.75),
    pm(-0.105, 0.0, 0.0, 0.06, 0.08, 0.10, 0.75),
    pm(4.787, 0.0, 0.0, 0.10, 0.15, 0.25, 0.80),
];

impl Default for SynthSiteConfig {
    fn default() -> Self {
        Self {
            site_id: "S1".into(),
            zones: vec![Zone { region: Region { x_min: 0.0, x_max: 3000.0, y_min: 0.0, y_max: 3000.0 }, n_boreholes: 40 }],
            records_per_borehole: IntRange::new(8, 16),
            top_depth: 1.0,
            depth_step: 1.0,
            depth_jitter: 0.3,
            params: DEFAULT_PARAMS,
            loadings: DEFAULT_LOADINGS.iter().map(|r| r.to_vec()).collect(),
            spatial: SpatialField { length_scale: 800.0, n_waves: 64 },
            seed: 0,
        }
    }
}

impl SynthSiteConfig {
    pub fn n_boreholes(&self) -> usize {
        self.zones.iter().map(|z| z.n_boreholes).sum()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.first().map_or(0, Vec::len)
    }

    pub fn param(&self, p: Param) -> &ParamModel {
        &self.params[p.index()]
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let bad = |m: String| Err(GeoError::InvalidConfig(m));
        if self.loadings.len() != N_PARAMS {
            return bad(format!("loading matrix has {} rows, need {N_PARAMS}", self.loadings.len()));
        }
        let k = self.n_factors();
        if self.loadings.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
            return bad("loading matrix must be rectangular and finite".into());
        }
        for (p, m) in Param::ALL.iter().zip(&self.params) {
            let fields = [m.intercept, m.slope, m.log_depth, m.spatial, m.borehole_sd, m.noise_sd];
            if fields.iter().any(|v| !v.is_finite()) || m.borehole_sd < 0.0 || m.noise_sd < 0.0 {
                return bad(format!("{p}: coefficients must be finite and scales non-negative"));
            }
            if !(0.0..1.0).contains(&m.missing_rate) {
                return bad(format!("{p}: missing rate {} outside [0, 1)", m.missing_rate));
            }
        }
        if self.records_per_borehole.min == 0 || self.records_per_borehole.min > self.records_per_borehole.max {
            return bad("records_per_borehole must be a non-empty range of positive counts".into());
        }
        if !(self.depth_step > 0.0) || !(self.depth_jitter >= 0.0) || self.depth_jitter * 2.0 >= self.depth_step {
            return bad("need depth_step > 0 and 0 ≤ 2·depth_jitter < depth_step".into());
        }
        if !(self.top_depth >= self.depth_jitter) {
            return bad("top_depth must leave room for the jitter above zero".into());
        }
        if !(self.spatial.length_scale > 0.0) {
            return bad("spatial length scale must be positive".into());
        }
        for z in &self.zones {
            let r = &z.region;
            if !(r.x_min <= r.x_max && r.y_min <= r.y_max) || ![r.x_min, r.x_max, r.y_min, r.y_max].iter().all(|v| v.is_finite()) {
                return bad(format!("zone {r:?} is not a valid rectangle"));
            }
        }
        Ok(())
    }
}

/// Generates a site; see `generate_site_with_truth`.
pub fn generate_site(cfg: &SynthSiteConfig) -> Result<SiteTable, GeoError> {
    generate_site_with_truth(cfg).map(|(observed, _)| observed)
}

/// Returns the observed table (missingness applied) and the complete table
/// it was masked from. Both list the same records in the same order.
pub fn generate_site_with_truth(cfg: &SynthSiteConfig) -> Result<(SiteTable, SiteTable), GeoError> {
    cfg.validate()?;
    let mut field_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    field_rng.set_stream(1);
    let field = Field::draw(&cfg.spatial, &mut field_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.n_factors();

    let mut complete = Vec::new();
    let mut observed = Vec::new();
    let mut bh = 0usize;
    for zone in &cfg.zones {
        for _ in 0..zone.n_boreholes {
            bh += 1;
            let r = &zone.region;
            let x = round_significant(rng.random_range(r.x_min..=r.x_max), SIGNIFICANT_DIGITS);
            let y = round_significant(rng.random_range(r.y_min..=r.y_max), SIGNIFICANT_DIGITS);
            let g = field.at(x, y);
            let effects: Vec<f64> = cfg.params.iter().map(|m| m.borehole_sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let n = cfg.records_per_borehole.sample(&mut rng);
            let borehole_id = format!("{}-B{bh:03}", cfg.site_id);
            for i in 0..n {
                let nominal = cfg.top_depth + i as f64 * cfg.depth_step;
                let jitter = if cfg.depth_jitter > 0.0 { rng.random_range(-cfg.depth_jitter..=cfg.depth_jitter) } else { 0.0 };
                let depth = round_significant((nominal + jitter).max(0.0), SIGNIFICANT_DIGITS);
                let factors: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let mut params = [None; N_PARAMS];
                for (j, m) in cfg.params.iter().enumerate() {
                    let latent: f64 = cfg.loadings[j].iter().zip(&factors).map(|(l, f)| l * f).sum();
                    let noise = m.noise_sd * rng.sample::<f64, _>(StandardNormal);
                    let log_v = m.trend(depth) + m.spatial * g + effects[j] + latent + noise;
                    params[j] = Some(log_v.exp());
                }
                if let (Some(ll), Some(pl)) = (params[Param::LL.index()], params[Param::PL.index()]) {
                    params[Param::PL.index()] = Some(pl.min(PL_CAP * ll));
                }
                for v in params.iter_mut() {
                    *v = v.map(|v| round_significant(v, SIGNIFICANT_DIGITS));
                }
                let full = BoreholeRecord { site_id: cfg.site_id.clone(), borehole_id: borehole_id.clone(), x, y, depth, params };
                let mut masked = full.clone();
                for (j, m) in cfg.params.iter().enumerate() {
                    if rng.random::<f64>() < m.missing_rate {
                        masked.params[j] = None;
                    }
                }
                complete.push(full);
                observed.push(masked);
            }
        }
    }
    Ok((SiteTable::new(cfg.site_id.clone(), observed)?, SiteTable::new(format!("{}:complete", cfg.site_id), complete)?))
}
