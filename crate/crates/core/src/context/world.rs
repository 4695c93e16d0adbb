//! Synthetic benchmark worlds: a local database around a densely sampled
//! verification site, a foreign global database, and a two-region site for
//! checking that context relevance matters.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextError, View};
use crate::geodata::{
    generate_site_with_truth, split_verification, BoreholeRecord, Param, Region, SiteTable, SynthSiteConfig, Zone,
};
use crate::prior::IntRange;

/// A BID is either one table for every target, or a table per target
/// borehole (built from that borehole's neighbours).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BidSource {
    Table(SiteTable),
    PerBorehole { label: String, tables: BTreeMap<String, SiteTable> },
}

impl BidSource {
    pub fn label(&self) -> &str {
        match self {
            BidSource::Table(t) => &t.label,
            BidSource::PerBorehole { label, .. } => label,
        }
    }

    pub fn for_borehole(&self, borehole: &str) -> Result<&SiteTable, ContextError> {
        match self {
            BidSource::Table(t) => Ok(t),
            BidSource::PerBorehole { tables, .. } => {
                tables.get(borehole).ok_or_else(|| ContextError::UnknownBorehole(borehole.to_string()))
            }
        }
    }

    pub fn site_wide(&self) -> Option<&SiteTable> {
        match self {
            BidSource::Table(t) => Some(t),
            BidSource::PerBorehole { .. } => None,
        }
    }

    /// Total rows, summed over per-borehole tables.
    pub fn n_records(&self) -> usize {
        match self {
            BidSource::Table(t) => t.len(),
            BidSource::PerBorehole { tables, .. } => tables.values().map(SiteTable::len).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub area: Region,
    pub local_boreholes: usize,
    pub verification_region: Region,
    pub verification_boreholes: usize,
    pub global_boreholes: usize,
    /// Radius around the verification centre for the near-site BID.
    pub near_radius: f64,
    /// Neighbour boreholes per target in the per-borehole BID.
    pub nearest_k: usize,
    pub records_per_borehole: IntRange,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            area: Region { x_min: 0.0, x_max: 3000.0, y_min: 0.0, y_max: 3000.0 },
            local_boreholes: 60,
            verification_region: Region { x_min: 1350.0, x_max: 1650.0, y_min: 1350.0, y_max: 1650.0 },
            verification_boreholes: 5,
            global_boreholes: 40,
            near_radius: 900.0,
            nearest_k: 6,
            records_per_borehole: IntRange::new(8, 16),
        }
    }
}

impl WorldConfig {
    fn site_config(&self) -> SynthSiteConfig {
        SynthSiteConfig {
            site_id: "L".into(),
            zones: vec![
                Zone { region: self.area, n_boreholes: self.local_boreholes },
                Zone { region: self.verification_region, n_boreholes: self.verification_boreholes },
            ],
            records_per_borehole: self.records_per_borehole,
            seed: self.seed,
            ..SynthSiteConfig::default()
        }
    }

    /// A different clay population, far from the local site.
    fn global_config(&self) -> SynthSiteConfig {
        let mut cfg = SynthSiteConfig {
            site_id: "G".into(),
            zones: vec![Zone {
                region: Region { x_min: 50_000.0, x_max: 60_000.0, y_min: 50_000.0, y_max: 60_000.0 },
                n_boreholes: self.global_boreholes,
            }],
            records_per_borehole: self.records_per_borehole,
            seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
            ..SynthSiteConfig::default()
        };
        for p in Param::MECHANICAL {
            let m = &mut cfg.params[p.index()];
            m.intercept += 0.35;
            m.slope *= 0.5;
            m.log_depth *= 0.5;
            m.borehole_sd *= 2.5;
        }
        cfg
    }
}

/// Everything Benchmark #1 needs.
#[derive(Clone, Debug)]
pub struct Bench1World {
    /// Local database outside the verification region.
    pub local_bid: SiteTable,
    /// Verification site as observed.
    pub verification: SiteTable,
    /// Same records with nothing missing.
    pub verification_truth: SiteTable,
    pub global_bid: SiteTable,
    /// Targets of the profile predictions.
    pub targets: Vec<String>,
    /// Per-borehole neighbour BID, local BID near the site, whole local BID,
    /// global BID.
    pub bids: Vec<BidSource>,
}

fn distance2(a: &BoreholeRecord, x: f64, y: f64) -> f64 {
    (a.x - x).powi(2) + (a.y - y).powi(2)
}

pub fn bench1_world(cfg: &WorldConfig, view: View) -> Result<Bench1World, ContextError> {
    let site_cfg = cfg.site_config();
    let (observed, truth) = generate_site_with_truth(&site_cfg)?;
    let (local, verification) = split_verification(&observed, &cfg.verification_region)?;
    let (_, verification_truth) = split_verification(&truth, &cfg.verification_region)?;
    let (global, _) = generate_site_with_truth(&cfg.global_config())?;

    let ids = observed.borehole_ids();
    let targets: Vec<String> = ids[ids.len() - cfg.verification_boreholes..].to_vec();
    let suffix = view.suffix();

    let r = &cfg.verification_region;
    let (cx, cy) = (0.5 * (r.x_min + r.x_max), 0.5 * (r.y_min + r.y_max));
    let near = local.filter(format!("Local-BID-V{suffix}"), |rec| distance2(rec, cx, cy) <= cfg.near_radius.powi(2));

    let local_ids = local.borehole_ids();
    let local_heads: Vec<&BoreholeRecord> = local_ids.iter().filter_map(|id| local.borehole(id).next()).collect();
    let mut per_borehole = BTreeMap::new();
    for t in &targets {
        let head = verification.borehole(t).next().ok_or_else(|| ContextError::UnknownBorehole(t.clone()))?;
        let mut ranked: Vec<(f64, &str)> =
            local_heads.iter().map(|h| (distance2(h, head.x, head.y), h.borehole_id.as_str())).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        let chosen: Vec<&str> = ranked.iter().take(cfg.nearest_k).map(|(_, id)| *id).collect();
        let table = local.filter(format!("Nearby-BID{suffix}:{t}"), |rec| chosen.contains(&rec.borehole_id.as_str()));
        per_borehole.insert(t.clone(), table);
    }

    let mut local_bid = local;
    local_bid.label = format!("Local-BID{suffix}");
    let mut global_bid = global;
    global_bid.label = format!("Global-BID{suffix}");
    let bids = vec![
        BidSource::PerBorehole { label: format!("Nearby-BID{suffix}"), tables: per_borehole },
        BidSource::Table(near),
        BidSource::Table(local_bid.clone()),
        BidSource::Table(global_bid.clone()),
    ];
    Ok(Bench1World { local_bid, verification, verification_truth, global_bid, targets, bids })
}

/// Missing-set of each engineered pattern; the sizes sum to 14.
pub const BENCH2_PATTERNS: [&[Param]; 4] = [
    &[Param::Su, Param::Eu, Param::SigmaP, Param::Cc, Param::Cv],
    &[Param::Eu, Param::SigmaP, Param::Cc, Param::Cv],
    &[Param::SigmaP, Param::Cc, Param::Cv],
    &[Param::Cc, Param::Cv],
];

/// Records per engineered pattern.
pub const BENCH2_RECORDS_PER_PATTERN: usize = 5;

/// The imputation problem: verification records with every value present,
/// except that the first `4 × 5` records lose their pattern's mechanical
/// parameters (record `i` gets pattern `i mod 4`). Returns the problem table
/// and its complete twin.
pub fn bench2_problem(verification_truth: &SiteTable) -> Result<(SiteTable, SiteTable), ContextError> {
    let n = BENCH2_PATTERNS.len() * BENCH2_RECORDS_PER_PATTERN;
    if verification_truth.len() <= n {
        return Err(ContextError::Contract(format!(
            "verification site has {} records, the engineered patterns need more than {n}",
            verification_truth.len()
        )));
    }
    let mut records = verification_truth.records().to_vec();
    for (i, r) in records.iter_mut().take(n).enumerate() {
        for &p in BENCH2_PATTERNS[i % BENCH2_PATTERNS.len()] {
            r.set(p, None);
        }
    }
    let problem = SiteTable::new("verification/11", records)?;
    let mut truth = verification_truth.clone();
    truth.label = "verification/11:truth".into();
    Ok((problem, truth))
}

/// Two regions with opposite shear-strength depth trends, and one target
/// borehole in region A with only its shallowest records observed.
#[derive(Clone, Debug)]
pub struct TwoRegionWorld {
    pub matched: SiteTable,
    pub mismatched: SiteTable,
    pub target_site: SiteTable,
    pub target_truth: SiteTable,
    pub target: String,
}

/// Observed shear strength rows in the target borehole.
const TWO_REGION_OBSERVED: usize = 3;

pub fn two_region_world(seed: u64, bid_boreholes: usize) -> Result<TwoRegionWorld, ContextError> {
    let base = |site: &str, region: Region, n: usize, seed: u64| {
        let mut cfg = SynthSiteConfig {
            site_id: site.into(),
            zones: vec![Zone { region, n_boreholes: n }],
            records_per_borehole: IntRange::new(12, 12),
            seed,
            ..SynthSiteConfig::default()
        };
        cfg.params[Param::Su.index()].missing_rate = 0.0;
        cfg
    };
    let a = base("A", Region { x_min: 0.0, x_max: 1000.0, y_min: 0.0, y_max: 1000.0 }, bid_boreholes + 1, seed.wrapping_mul(2));
    let mut b = base(
        "B",
        Region { x_min: 2000.0, x_max: 3000.0, y_min: 0.0, y_max: 1000.0 },
        bid_boreholes,
        seed.wrapping_mul(2).wrapping_add(1),
    );
    let su = &mut b.params[Param::Su.index()];
    su.intercept = 3.6;
    su.slope = -0.02;
    su.log_depth = 0.0;

    let (_, a_truth) = generate_site_with_truth(&a)?;
    let (_, b_truth) = generate_site_with_truth(&b)?;
    let ids = a_truth.borehole_ids();
    let target = ids.last().expect("at least one borehole").clone();
    let matched = a_truth.filter("matched", |r| r.borehole_id != target);
    let mismatched = b_truth.filter("mismatched", |_| true);
    let target_truth = a_truth.filter("target:truth", |r| r.borehole_id == target);

    let mut observed = target_truth.records().to_vec();
    observed.sort_by(|x, y| x.depth.total_cmp(&y.depth));
    for r in observed.iter_mut().skip(TWO_REGION_OBSERVED) {
        r.set(Param::Su, None);
    }
    let target_site = SiteTable::new("target", observed)?;
    Ok(TwoRegionWorld { matched, mismatched, target_site, target_truth, target })
}

/// Uniform subsample of `n` records, order preserved.
pub fn subsample(table: &SiteTable, n: usize, seed: u64) -> SiteTable {
    if table.len() <= n {
        return table.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, table.len(), n).into_vec();
    keep.sort_unstable();
    let mut i = 0usize;
    let mut next = 0usize;
    table.filter(table.label.clone(), |_| {
        let take = keep.get(next) == Some(&i);
        if take {
            next += 1;
        }
        i += 1;
        take
    })
}
