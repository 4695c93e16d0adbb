//! Metrics and reporting: RMSE of predictive means, 95% interval coverage,
//! wall-clock accounting, runtime tables and per-group profile plots.

mod svg;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use svg::profile_svg;

use crate::infer::Prediction;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} predictions vs {right} truths")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("conflicting group key {0}")]
    ConflictingGroup(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn check_lengths(left: usize, right: usize) -> Result<(), EvalError> {
    if left != right {
        return Err(EvalError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(EvalError::Empty("zero-length vectors"));
    }
    Ok(())
}

pub fn mse(pred_means: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    check_lengths(pred_means.len(), truths.len())?;
    let sum: f64 = pred_means.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / truths.len() as f64)
}

pub fn rmse(pred_means: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    mse(pred_means, truths).map(f64::sqrt)
}

/// Closed interval: a truth on either endpoint counts as inside.
pub fn in_interval(q025: f64, q975: f64, truth: f64) -> bool {
    q025 <= truth && truth <= q975
}

/// Fraction of truths inside their `[q025, q975]`.
pub fn coverage95(predictions: &[Prediction], truths: &[f64]) -> Result<f64, EvalError> {
    check_lengths(predictions.len(), truths.len())?;
    let inside = predictions.iter().zip(truths).filter(|(p, &t)| in_interval(p.q025, p.q975, t)).count();
    Ok(inside as f64 / truths.len() as f64)
}

/// Runs `thunk` and returns its result with the elapsed monotonic seconds.
pub fn timeit<R>(thunk: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let out = thunk();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// Slash-joined names from the outermost phase down.
    pub path: String,
    pub seconds: f64,
}

/// Named, nestable wall-clock phases. Records appear in completion order.
#[derive(Clone, Debug, Default)]
pub struct PhaseTimer {
    stack: Vec<String>,
    records: Vec<PhaseRecord>,
}

impl PhaseTimer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Times `thunk` as phase `label`. The thunk gets the timer back so it
    /// can open child phases.
    pub fn timeit<R>(&mut self, label: &str, thunk: impl FnOnce(&mut Self) -> R) -> (R, f64) {
        self.stack.push(label.to_string());
        let path = self.stack.join("/");
        let start = Instant::now();
        let out = thunk(self);
        let seconds = start.elapsed().as_secs_f64();
        self.stack.pop();
        self.records.push(PhaseRecord { path, seconds });
        (out, seconds)
    }

    pub fn records(&self) -> &[PhaseRecord] {
        &self.records
    }

    /// Summed seconds over every record with exactly this path.
    pub fn total(&self, path: &str) -> f64 {
        self.records.iter().filter(|r| r.path == path).map(|r| r.seconds).sum()
    }

    /// Summed seconds of the direct children of `path`.
    pub fn children_total(&self, path: &str) -> f64 {
        let prefix = format!("{path}/");
        self.records
            .iter()
            .filter(|r| r.path.strip_prefix(&prefix).is_some_and(|rest| !rest.contains('/')))
            .map(|r| r.seconds)
            .sum()
    }
}

/// Wall-clock split of one run. Network runs exclude pretraining, baseline
/// runs include fitting on the BID.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Runtime {
    Network { context_build_s: f64, inference_s: f64 },
    Baseline { fit_s: f64, inference_s: f64 },
}

impl Runtime {
    pub fn total(&self) -> f64 {
        match *self {
            Runtime::Network { context_build_s, inference_s } => context_build_s + inference_s,
            Runtime::Baseline { fit_s, inference_s } => fit_s + inference_s,
        }
    }

    pub fn attribution(&self) -> &'static str {
        match self {
            Runtime::Network { .. } => "context build + inference; pretraining excluded as a one-time cost",
            Runtime::Baseline { .. } => "fit on the BID + inference",
        }
    }
}

pub const RUNTIME_NOTE: &str = "PFN runtimes cover context build and inference and exclude pretraining, \
which is a one-time cost. HBM runtimes cover fitting on the BID and inference.";

/// One evaluated test row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    /// Borehole id for profile benchmarks, parameter name for imputation.
    pub group: String,
    pub borehole: String,
    pub depth: f64,
    pub truth: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

impl PointResult {
    pub fn new(group: impl Into<String>, borehole: impl Into<String>, depth: f64, truth: f64, p: &Prediction) -> Self {
        Self {
            group: group.into(),
            borehole: borehole.into(),
            depth,
            truth,
            mean: p.mean,
            q025: p.q025,
            q975: p.q975,
        }
    }

    pub fn covered(&self) -> bool {
        in_interval(self.q025, self.q975, self.truth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub n: usize,
    pub rmse: f64,
    pub coverage: f64,
}

fn group_metrics(group: String, points: &[&PointResult]) -> Result<GroupMetrics, EvalError> {
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let truths: Vec<f64> = points.iter().map(|p| p.truth).collect();
    let covered = points.iter().filter(|p| p.covered()).count();
    Ok(GroupMetrics {
        group,
        n: points.len(),
        rmse: rmse(&means, &truths)?,
        coverage: covered as f64 / points.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task: String,
    pub seconds: f64,
}

/// Metrics of one (benchmark, method, scenario, BID) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub benchmark: String,
    pub method: String,
    pub scenario: String,
    pub bid: String,
    /// In first-appearance order of the points.
    pub groups: Vec<GroupMetrics>,
    /// Over every point at once.
    pub pooled: GroupMetrics,
    /// Unweighted mean of the group coverages.
    pub mean_group_coverage: f64,
    pub points: Vec<PointResult>,
    pub runtime: Runtime,
    pub tasks: Vec<TaskTiming>,
    /// Path of the run manifest.
    pub manifest: String,
}

/// Identifies a report among others; two reports may not share one.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReportKey {
    pub benchmark: String,
    pub method: String,
    pub scenario: String,
    pub bid: String,
}

impl std::fmt::Display for ReportKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/{}", self.benchmark, self.method, self.scenario, self.bid)
    }
}

impl MetricReport {
    pub fn from_points(
        key: ReportKey,
        points: Vec<PointResult>,
        runtime: Runtime,
        tasks: Vec<TaskTiming>,
        manifest: impl Into<String>,
    ) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::Empty("no evaluated points"));
        }
        let mut order: Vec<&str> = Vec::new();
        let mut by_group: BTreeMap<&str, Vec<&PointResult>> = BTreeMap::new();
        for p in &points {
            let slot = by_group.entry(p.group.as_str()).or_default();
            if slot.is_empty() {
                order.push(p.group.as_str());
            }
            slot.push(p);
        }
        let groups =
            order.iter().map(|g| group_metrics(g.to_string(), &by_group[g])).collect::<Result<Vec<_>, _>>()?;
        let all: Vec<&PointResult> = points.iter().collect();
        let pooled = group_metrics("pooled".into(), &all)?;
        let mean_group_coverage = groups.iter().map(|g| g.coverage).sum::<f64>() / groups.len() as f64;
        Ok(Self {
            benchmark: key.benchmark,
            method: key.method,
            scenario: key.scenario,
            bid: key.bid,
            groups,
            pooled,
            mean_group_coverage,
            points,
            runtime,
            tasks,
            manifest: manifest.into(),
        })
    }

    pub fn key(&self) -> ReportKey {
        ReportKey {
            benchmark: self.benchmark.clone(),
            method: self.method.clone(),
            scenario: self.scenario.clone(),
            bid: self.bid.clone(),
        }
    }

    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn task_seconds_total(&self) -> f64 {
        self.tasks.iter().map(|t| t.seconds).sum()
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Whole seconds from 100 up, three significant digits below.
pub fn format_seconds(s: f64) -> String {
    if s.abs() >= 100.0 || s == 0.0 {
        return format!("{s:.0}");
    }
    let digits = (2 - s.abs().log10().floor() as i32).max(0) as usize;
    format!("{s:.digits$}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table1Row {
    pub bid: String,
    pub hbm: Option<f64>,
    pub individual: Option<f64>,
    pub simultaneous: Option<f64>,
}

/// One row per BID, in first-appearance order. Network runs are split by
/// scenario; any other method counts as the baseline.
pub fn table1_rows(reports: &[MetricReport]) -> Vec<Table1Row> {
    let mut rows: Vec<Table1Row> = Vec::new();
    for r in reports {
        let i = match rows.iter().position(|row| row.bid == r.bid) {
            Some(i) => i,
            None => {
                rows.push(Table1Row { bid: r.bid.clone(), hbm: None, individual: None, simultaneous: None });
                rows.len() - 1
            }
        };
        let slot = match (&r.runtime, r.scenario.as_str()) {
            (Runtime::Baseline { .. }, _) => &mut rows[i].hbm,
            (Runtime::Network { .. }, "simultaneous") => &mut rows[i].simultaneous,
            (Runtime::Network { .. }, _) => &mut rows[i].individual,
        };
        *slot = Some(slot.unwrap_or(0.0) + r.runtime.total());
    }
    rows
}

pub fn render_table1(rows: &[Table1Row]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), format_seconds);
    rows.iter()
        .map(|r| {
            format!(
                "{} | HBM {} | individual {} | simultaneous {}\n",
                r.bid,
                cell(r.hbm),
                cell(r.individual),
                cell(r.simultaneous)
            )
        })
        .collect()
}

/// Per-task network seconds, then the summary line.
pub fn render_table2(hbm_seconds: f64, pfn_tasks: &[TaskTiming]) -> String {
    let mut out = String::new();
    for t in pfn_tasks {
        out.push_str(&format!("{} | PFN {}\n", t.task, format_seconds(t.seconds)));
    }
    let total: f64 = pfn_tasks.iter().map(|t| t.seconds).sum();
    out.push_str(&format!("HBM {} / PFN-total {}\n", format_seconds(hbm_seconds), format_seconds(total)));
    out
}

/// Table 2 from a baseline report and a network report of the same run.
pub fn table2_from_reports(reports: &[MetricReport]) -> Option<String> {
    let hbm = reports.iter().find(|r| matches!(r.runtime, Runtime::Baseline { .. }))?;
    let pfn = reports.iter().find(|r| matches!(r.runtime, Runtime::Network { .. }))?;
    Some(render_table2(hbm.runtime.total(), &pfn.tasks))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let io = |source| EvalError::Io { path: path.to_path_buf(), source };
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub const METRICS_HEADER: [&str; 9] =
    ["benchmark", "method", "scenario", "bid", "level", "group", "n", "rmse", "coverage"];
pub const POINTS_HEADER: [&str; 12] =
    ["benchmark", "method", "scenario", "bid", "group", "borehole", "depth", "truth", "mean", "q025", "q975", "covered"];

fn check_reports(reports: &[MetricReport]) -> Result<(), EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("no reports"));
    }
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.key()) {
            return Err(EvalError::ConflictingGroup(r.key().to_string()));
        }
        let mut groups = HashSet::new();
        for g in &r.groups {
            if !groups.insert(g.group.as_str()) {
                return Err(EvalError::ConflictingGroup(format!("{}:{}", r.key(), g.group)));
            }
        }
    }
    Ok(())
}

/// Per-group and pooled metrics. No timing, so identical inputs give
/// identical bytes.
pub fn metrics_csv(reports: &[MetricReport]) -> Result<Vec<u8>, EvalError> {
    check_reports(reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        let rows = r.groups.iter().map(|g| ("group", g)).chain(std::iter::once(("pooled", &r.pooled)));
        for (level, g) in rows {
            w.write_record([
                r.benchmark.as_str(),
                &r.method,
                &r.scenario,
                &r.bid,
                level,
                &g.group,
                &g.n.to_string(),
                &g.rmse.to_string(),
                &g.coverage.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| EvalError::Io { path: PathBuf::from("<memory>"), source: e.into_error() })
}

/// One row per evaluated point with its coverage indicator.
pub fn points_csv(reports: &[MetricReport]) -> Result<Vec<u8>, EvalError> {
    check_reports(reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(POINTS_HEADER)?;
    for r in reports {
        for p in &r.points {
            w.write_record([
                r.benchmark.as_str(),
                &r.method,
                &r.scenario,
                &r.bid,
                &p.group,
                &p.borehole,
                &p.depth.to_string(),
                &p.truth.to_string(),
                &p.mean.to_string(),
                &p.q025.to_string(),
                &p.q975.to_string(),
                if p.covered() { "1" } else { "0" },
            ])?;
        }
    }
    w.into_inner().map_err(|e| EvalError::Io { path: PathBuf::from("<memory>"), source: e.into_error() })
}

/// Markdown runtime summary: the Table-1 rows for profile benchmarks, the
/// Table-2 summary when there is a baseline and a network run with tasks.
pub fn runtime_markdown(reports: &[MetricReport]) -> Result<String, EvalError> {
    check_reports(reports)?;
    let mut out = String::from("# Runtimes (seconds)\n\n");
    out.push_str(RUNTIME_NOTE);
    out.push_str("\n\n```\n");
    let profile: Vec<MetricReport> = reports.iter().filter(|r| r.benchmark != "bench2").cloned().collect();
    if !profile.is_empty() {
        out.push_str(&render_table1(&table1_rows(&profile)));
    }
    let imputation: Vec<MetricReport> = reports.iter().filter(|r| r.benchmark == "bench2").cloned().collect();
    if let Some(t2) = table2_from_reports(&imputation) {
        out.push_str(&t2);
    }
    out.push_str("```\n");
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReportOptions {
    pub plots: bool,
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `metrics.csv`, `points.csv`, `report.json`, `runtime.md` and,
/// if asked, one SVG per (benchmark, BID, group) into `dir`. Returns the
/// written paths.
pub fn report(reports: &[MetricReport], dir: &Path, opts: ReportOptions) -> Result<Vec<PathBuf>, EvalError> {
    check_reports(reports)?;
    fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<(), EvalError> {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put("metrics.csv".into(), &metrics_csv(reports)?)?;
    put("points.csv".into(), &points_csv(reports)?)?;
    put("report.json".into(), serde_json::to_string_pretty(reports)?.as_bytes())?;
    put("runtime.md".into(), runtime_markdown(reports)?.as_bytes())?;
    if opts.plots {
        // Methods sharing a benchmark, BID and group share a chart.
        let mut charts: BTreeMap<(String, String, String), Vec<(String, Vec<PointResult>)>> = BTreeMap::new();
        for r in reports {
            for g in &r.groups {
                let pts: Vec<PointResult> = r.points.iter().filter(|p| p.group == g.group).cloned().collect();
                let label = format!("{} {}", r.method, r.scenario);
                charts.entry((r.benchmark.clone(), r.bid.clone(), g.group.clone())).or_default().push((label, pts));
            }
        }
        for ((bench, bid, group), series) in &charts {
            let title = format!("{bench} {bid} {group}");
            let name = format!("{}_{}_{}.svg", file_stem(bench), file_stem(bid), file_stem(group));
            put(name, profile_svg(&title, series).as_bytes())?;
        }
    }
    Ok(written)
}

pub fn load_reports(path: &Path) -> Result<Vec<MetricReport>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}
