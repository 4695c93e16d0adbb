//! Turns site tables into prediction tasks for the benchmark scenarios:
//! per-borehole and site-wide profile prediction, and per-pattern
//! imputation of missing mechanical parameters.
//!
//! Soil parameters enter tasks as natural logs (they are all positive);
//! coordinates and depth enter raw. Borehole identity, when used, is an
//! integer code from a `CodeBook`.

mod world;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use world::{
    bench1_world, bench2_problem, subsample, two_region_world, Bench1World, BidSource, TwoRegionWorld, WorldConfig,
    BENCH2_PATTERNS, BENCH2_RECORDS_PER_PATTERN,
};

use crate::geodata::{BoreholeRecord, GeoError, Param, SiteTable};
use crate::prior::{FeatureKind, FeatureMatrix, PriorError, Task};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("invalid context spec: {0}")]
    InvalidSpec(String),
    #[error("borehole {0:?} not found in the site table")]
    UnknownBorehole(String),
    #[error("empty context for {target}: no training rows with an observed target")]
    EmptyContext { target: Param },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("leak: test row {borehole}@{depth} has an observed {target}")]
    Leak { borehole: String, depth: f64, target: Param },
    #[error("task exceeds capacity: {site_rows} site-specific training rows, at most {limit} fit")]
    Capacity { site_rows: usize, limit: usize },
    #[error(transparent)]
    Task(#[from] PriorError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Individual,
    Simultaneous,
    Imputation,
}

/// Named feature subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    /// Coordinates and depth only.
    #[serde(rename = "4")]
    Four,
    /// Coordinates, depth and every other soil parameter.
    #[serde(rename = "11")]
    Eleven,
}

impl View {
    pub fn features(self, target: Param) -> Vec<Column> {
        let mut cols = vec![Column::X, Column::Y, Column::Depth];
        if self == View::Eleven {
            cols.extend(Param::ALL.into_iter().filter(|&p| p != target).map(Column::Param));
        }
        cols
    }

    pub fn suffix(self) -> &'static str {
        match self {
            View::Four => "/4",
            View::Eleven => "/11",
        }
    }
}

impl std::str::FromStr for View {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "4" => Ok(View::Four),
            "11" => Ok(View::Eleven),
            other => Err(format!("unknown view {other:?}, expected 4 or 11")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    X,
    Y,
    Depth,
    /// Integer-coded borehole identity.
    Borehole,
    Param(Param),
}

impl Column {
    pub fn name(&self) -> String {
        match self {
            Column::X => "x".into(),
            Column::Y => "y".into(),
            Column::Depth => "depth".into(),
            Column::Borehole => "borehole_id".into(),
            Column::Param(p) => p.name().into(),
        }
    }

    fn kind(&self) -> FeatureKind {
        match self {
            Column::Borehole => FeatureKind::Categorical,
            _ => FeatureKind::Continuous,
        }
    }
}

/// Stable integer codes for (site, borehole) pairs, assigned in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeBook {
    codes: BTreeMap<String, usize>,
}

impl CodeBook {
    pub fn from_tables(tables: &[&SiteTable]) -> Self {
        let keys: BTreeSet<String> =
            tables.iter().flat_map(|t| t.records().iter().map(Self::key)).collect();
        Self { codes: keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect() }
    }

    fn key(r: &BoreholeRecord) -> String {
        format!("{}\u{1f}{}", r.site_id, r.borehole_id)
    }

    pub fn code(&self, r: &BoreholeRecord) -> Option<usize> {
        self.codes.get(&Self::key(r)).copied()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Cap on rows per forward pass. BID rows are subsampled to fit; site rows
/// are never dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub max_rows: usize,
    /// Test rows per pass; the training budget is `max_rows` minus this
    /// (or minus the test count when smaller).
    pub test_chunk: usize,
    pub seed: u64,
}

impl Truncation {
    pub fn for_model(max_rows: usize, seed: u64) -> Self {
        Self { max_rows, test_chunk: (max_rows / 4).max(1), seed }
    }

    pub fn train_budget(&self, n_test: usize) -> usize {
        self.max_rows.saturating_sub(n_test.min(self.test_chunk).max(1))
    }
}

#[derive(Clone, Debug)]
pub struct ContextSpec {
    pub bid: SiteTable,
    pub features: Vec<Column>,
    pub target: Param,
    pub scenario: Scenario,
    pub boreholes: Vec<String>,
    pub codes: CodeBook,
    pub truncation: Option<Truncation>,
}

impl ContextSpec {
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.features.is_empty() {
            return Err(ContextError::InvalidSpec("feature subset is empty".into()));
        }
        if self.features.contains(&Column::Param(self.target)) {
            return Err(ContextError::InvalidSpec(format!("target {} is also a feature", self.target)));
        }
        let unique: BTreeSet<_> = self.features.iter().map(Column::name).collect();
        if unique.len() != self.features.len() {
            return Err(ContextError::InvalidSpec("duplicate feature columns".into()));
        }
        if let Some(t) = &self.truncation {
            if t.max_rows < 2 || t.test_chunk == 0 {
                return Err(ContextError::InvalidSpec("truncation needs max_rows ≥ 2 and test_chunk ≥ 1".into()));
            }
        }
        Ok(())
    }
}

/// Identifies a test row for looking up its truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub site_id: String,
    pub borehole_id: String,
    pub depth: f64,
}

impl RowKey {
    fn of(r: &BoreholeRecord) -> Self {
        Self { site_id: r.site_id.clone(), borehole_id: r.borehole_id.clone(), depth: r.depth }
    }
}

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub id: String,
    pub scenario: Scenario,
    pub bid: String,
    pub boreholes: Vec<String>,
    pub pattern: Option<Vec<Param>>,
    pub target: Param,
    pub features: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub site_train_rows: usize,
    pub bid_rows_available: usize,
    pub bid_rows_used: usize,
    /// Set when BID rows were subsampled.
    pub subsample_seed: Option<u64>,
    pub test_chunk: Option<usize>,
    /// Nothing to predict: every candidate row already has the target.
    pub empty_test: bool,
}

#[derive(Clone, Debug)]
pub struct BuiltTask {
    pub task: Task,
    pub meta: TaskMeta,
    pub test_keys: Vec<RowKey>,
}

fn cell(r: &BoreholeRecord, c: &Column, codes: &CodeBook) -> Option<f64> {
    match c {
        Column::X => Some(r.x),
        Column::Y => Some(r.y),
        Column::Depth => Some(r.depth),
        Column::Borehole => codes.code(r).map(|v| v as f64),
        Column::Param(p) => r.get(*p).map(f64::ln),
    }
}

fn matrix(rows: &[&BoreholeRecord], features: &[Column], codes: &CodeBook) -> Result<FeatureMatrix, ContextError> {
    let mut m = FeatureMatrix::empty(features.len());
    for r in rows {
        let cells: Vec<Option<f64>> = features.iter().map(|c| cell(r, c, codes)).collect();
        m.push_row(&cells)?;
    }
    Ok(m)
}

/// Assembles a task from BID rows, site rows with an observed target, and
/// test rows. Applies truncation to BID rows only and checks leak-freedom.
fn assemble(
    spec: &ContextSpec,
    id: String,
    boreholes: Vec<String>,
    pattern: Option<Vec<Param>>,
    site_train: Vec<&BoreholeRecord>,
    test: Vec<&BoreholeRecord>,
) -> Result<BuiltTask, ContextError> {
    let target = spec.target;
    for r in &test {
        if r.get(target).is_some() {
            return Err(ContextError::Leak { borehole: r.borehole_id.clone(), depth: r.depth, target });
        }
    }
    let bid_all: Vec<&BoreholeRecord> = spec.bid.records().iter().filter(|r| r.get(target).is_some()).collect();
    let mut bid_rows = bid_all.clone();
    let mut subsample_seed = None;
    if let Some(t) = &spec.truncation {
        let budget = t.train_budget(test.len());
        if site_train.len() > budget {
            return Err(ContextError::Capacity { site_rows: site_train.len(), limit: budget });
        }
        let room = budget - site_train.len();
        if bid_rows.len() > room {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            let mut keep = index::sample(&mut rng, bid_rows.len(), room).into_vec();
            keep.sort_unstable();
            bid_rows = keep.into_iter().map(|i| bid_all[i]).collect();
            subsample_seed = Some(t.seed);
        }
    }
    if bid_rows.is_empty() && site_train.is_empty() {
        return Err(ContextError::EmptyContext { target });
    }

    let train: Vec<&BoreholeRecord> = bid_rows.iter().chain(&site_train).copied().collect();
    let y_train: Vec<f64> = train.iter().map(|r| r.get(target).expect("filtered on target").ln()).collect();
    let task = Task::new(
        matrix(&train, &spec.features, &spec.codes)?,
        y_train,
        matrix(&test, &spec.features, &spec.codes)?,
        None,
        spec.features.iter().map(Column::kind).collect(),
    )?;
    let meta = TaskMeta {
        id,
        scenario: spec.scenario,
        bid: spec.bid.label.clone(),
        boreholes,
        pattern,
        target,
        features: spec.features.iter().map(Column::name).collect(),
        n_train: train.len(),
        n_test: test.len(),
        site_train_rows: site_train.len(),
        bid_rows_available: bid_all.len(),
        bid_rows_used: bid_rows.len(),
        subsample_seed,
        test_chunk: spec.truncation.map(|t| t.test_chunk),
        empty_test: test.is_empty(),
    };
    Ok(BuiltTask { task, meta, test_keys: test.iter().map(|r| RowKey::of(r)).collect() })
}

/// BID rows plus the borehole's observed-target rows as context; the
/// borehole's missing-target rows as queries.
pub fn build_individual(spec: &ContextSpec, site: &SiteTable, borehole_id: &str) -> Result<BuiltTask, ContextError> {
    spec.validate()?;
    if spec.scenario != Scenario::Individual {
        return Err(ContextError::InvalidSpec(format!("scenario is {:?}, expected individual", spec.scenario)));
    }
    let rows: Vec<&BoreholeRecord> = site.borehole(borehole_id).collect();
    if rows.is_empty() {
        return Err(ContextError::UnknownBorehole(borehole_id.to_string()));
    }
    let (train, test): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.get(spec.target).is_some());
    let id = format!("individual:{}:{}:{}", spec.bid.label, borehole_id, spec.target);
    assemble(spec, id, vec![borehole_id.to_string()], None, train, test)
}

/// One task for several boreholes at once, with borehole identity as a
/// categorical feature.
pub fn build_simultaneous(spec: &ContextSpec, site: &SiteTable, borehole_ids: &[String]) -> Result<BuiltTask, ContextError> {
    spec.validate()?;
    if spec.scenario != Scenario::Simultaneous {
        return Err(ContextError::InvalidSpec(format!("scenario is {:?}, expected simultaneous", spec.scenario)));
    }
    if borehole_ids.len() < 2 {
        return Err(ContextError::InvalidSpec("simultaneous prediction needs at least two boreholes".into()));
    }
    let mut spec = spec.clone();
    if !spec.features.contains(&Column::Borehole) {
        spec.features.push(Column::Borehole);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for id in borehole_ids {
        let rows: Vec<&BoreholeRecord> = site.borehole(id).collect();
        if rows.is_empty() {
            return Err(ContextError::UnknownBorehole(id.clone()));
        }
        for r in rows {
            if r.get(spec.target).is_some() {
                train.push(r);
            } else {
                test.push(r);
            }
        }
    }
    let id = format!("simultaneous:{}:{}", spec.bid.label, spec.target);
    assemble(&spec, id, borehole_ids.to_vec(), None, train, test)
}

/// Records sharing one exact set of missing mechanical parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingnessPattern {
    /// In canonical parameter order.
    pub missing: Vec<Param>,
    /// Indices into the record list the pattern was detected on.
    pub records: Vec<usize>,
}

impl MissingnessPattern {
    pub fn label(&self) -> String {
        self.missing.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
    }

    fn sort_key(&self) -> Vec<&'static str> {
        let mut names: Vec<&str> = self.missing.iter().map(|p| p.name()).collect();
        names.sort_unstable();
        names
    }
}

/// Groups incomplete records by their exact missing-mechanical set. Patterns
/// come out ordered by their sorted parameter names; complete records are
/// skipped.
pub fn detect_patterns(records: &[BoreholeRecord]) -> Vec<MissingnessPattern> {
    let mut groups: BTreeMap<Vec<Param>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let missing = r.missing_mechanical();
        if !missing.is_empty() {
            groups.entry(missing).or_default().push(i);
        }
    }
    let mut out: Vec<MissingnessPattern> =
        groups.into_iter().map(|(missing, records)| MissingnessPattern { missing, records }).collect();
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out
}

/// Context: the BID plus every problem record whose target is observed.
/// Queries: the pattern's records, carrying whatever they still have.
pub fn build_imputation(spec: &ContextSpec, problem: &SiteTable, pattern: &MissingnessPattern) -> Result<BuiltTask, ContextError> {
    spec.validate()?;
    if spec.scenario != Scenario::Imputation {
        return Err(ContextError::InvalidSpec(format!("scenario is {:?}, expected imputation", spec.scenario)));
    }
    if !pattern.missing.contains(&spec.target) {
        return Err(ContextError::Contract(format!("{} is not missing in pattern {}", spec.target, pattern.label())));
    }
    let records = problem.records();
    let mut test = Vec::with_capacity(pattern.records.len());
    for &i in &pattern.records {
        let r = records
            .get(i)
            .ok_or_else(|| ContextError::Contract(format!("pattern refers to record {i}, table has {}", records.len())))?;
        if r.missing_mechanical() != pattern.missing {
            return Err(ContextError::Contract(format!("record {i} does not match pattern {}", pattern.label())));
        }
        test.push(r);
    }
    let train: Vec<&BoreholeRecord> = records.iter().filter(|r| r.get(spec.target).is_some()).collect();
    let boreholes: BTreeSet<String> = test.iter().map(|r| r.borehole_id.clone()).collect();
    let id = format!("imputation:{}:{}:{}", spec.bid.label, pattern.label(), spec.target);
    assemble(spec, id, boreholes.into_iter().collect(), Some(pattern.missing.clone()), train, test)
}

fn spec_for(bid: &SiteTable, view: View, target: Param, scenario: Scenario, codes: &CodeBook, trunc: Option<Truncation>) -> ContextSpec {
    ContextSpec {
        bid: bid.clone(),
        features: view.features(target),
        target,
        scenario,
        boreholes: Vec::new(),
        codes: codes.clone(),
        truncation: trunc,
    }
}

/// Every (BID, borehole) pair, BID-major.
pub fn individual_tasks(
    bids: &[BidSource],
    site: &SiteTable,
    boreholes: &[String],
    view: View,
    target: Param,
    codes: &CodeBook,
    trunc: Option<Truncation>,
) -> Result<Vec<BuiltTask>, ContextError> {
    let mut out = Vec::with_capacity(bids.len() * boreholes.len());
    for bid in bids {
        for b in boreholes {
            let mut spec = spec_for(bid.for_borehole(b)?, view, target, Scenario::Individual, codes, trunc);
            spec.boreholes = vec![b.clone()];
            out.push(build_individual(&spec, site, b)?);
        }
    }
    Ok(out)
}

/// One task per site-wide BID; per-borehole BIDs are skipped since they
/// have no single context.
pub fn simultaneous_tasks(
    bids: &[BidSource],
    site: &SiteTable,
    boreholes: &[String],
    view: View,
    target: Param,
    codes: &CodeBook,
    trunc: Option<Truncation>,
) -> Result<Vec<BuiltTask>, ContextError> {
    bids.iter()
        .filter_map(BidSource::site_wide)
        .map(|bid| {
            let mut spec = spec_for(bid, view, target, Scenario::Simultaneous, codes, trunc);
            spec.boreholes = boreholes.to_vec();
            build_simultaneous(&spec, site, boreholes)
        })
        .collect()
}

/// One task per (pattern, missing parameter).
pub fn imputation_tasks(
    bid: &SiteTable,
    problem: &SiteTable,
    view: View,
    codes: &CodeBook,
    trunc: Option<Truncation>,
) -> Result<Vec<BuiltTask>, ContextError> {
    let mut out = Vec::new();
    for pattern in detect_patterns(problem.records()) {
        for &target in &pattern.missing {
            let spec = spec_for(bid, view, target, Scenario::Imputation, codes, trunc);
            out.push(build_imputation(&spec, problem, &pattern)?);
        }
    }
    Ok(out)
}
