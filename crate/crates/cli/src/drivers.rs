//! Benchmark and imputation drivers shared by the binary and the tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use geopfn::baseline::{fit, HBMSpec};
use geopfn::context::{
    bench1_world, bench2_problem, build_imputation, detect_patterns, individual_tasks, simultaneous_tasks, two_region_world, BidSource,
    BuiltTask, CodeBook, ContextSpec, MissingnessPattern, RowKey, Scenario, TaskMeta, Truncation, View,
};
use geopfn::eval::{timeit, MetricReport, PointResult, ReportKey, Runtime, TaskTiming};
use geopfn::geodata::{BoreholeRecord, Param, SiteTable};
use geopfn::infer::{predict_chunked, Prediction};
use geopfn::model::ModelCheckpoint;

use crate::config::{Bench1Config, Bench2Config};
use crate::error::CliError;

pub const THREADS_ENV: &str = "PFN_SITE_THREADS";

/// Worker cap: `PFN_SITE_THREADS` if set to a positive integer, otherwise
/// the available parallelism.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

/// Order-preserving parallel map over at most `threads` scoped workers.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Context row budget: the configured cap, else the row count the
/// checkpoint was pretrained on, never above what the model holds.
pub fn truncation_for(ckpt: &ModelCheckpoint, max_context_rows: Option<usize>, seed: u64) -> Truncation {
    let rows = max_context_rows.unwrap_or(ckpt.prior.max_rows).min(ckpt.model.max_rows);
    Truncation::for_model(rows, seed)
}

/// Soil-parameter predictions for every query row of a task built in log
/// space.
pub fn predict_task(ckpt: &ModelCheckpoint, built: &BuiltTask) -> Result<Vec<Prediction>, CliError> {
    if built.meta.n_test == 0 {
        return Ok(Vec::new());
    }
    let chunk = built.meta.test_chunk.unwrap_or(built.meta.n_test).max(1);
    let task_err = |source| CliError::Task { task: built.meta.id.clone(), source };
    predict_chunked(ckpt, &built.task, chunk)
        .map_err(task_err)?
        .into_iter()
        .map(|d| Prediction::from_log_distribution(d).map_err(|e| task_err(e.into())))
        .collect()
}

type TruthKey = (String, String, u64);

fn truth_key(site: &str, borehole: &str, depth: f64) -> TruthKey {
    (site.to_string(), borehole.to_string(), depth.to_bits())
}

/// Looks up complete records by (site, borehole, depth).
pub struct TruthIndex<'a> {
    rows: HashMap<TruthKey, &'a BoreholeRecord>,
}

impl<'a> TruthIndex<'a> {
    pub fn new(table: &'a SiteTable) -> Self {
        Self { rows: table.records().iter().map(|r| (truth_key(&r.site_id, &r.borehole_id, r.depth), r)).collect() }
    }

    pub fn value(&self, key: &RowKey, p: Param) -> Result<f64, CliError> {
        self.rows
            .get(&truth_key(&key.site_id, &key.borehole_id, key.depth))
            .and_then(|r| r.get(p))
            .ok_or_else(|| CliError::Usage(format!("no truth for {}@{} {p}", key.borehole_id, key.depth)))
    }
}

/// One network task after prediction.
pub struct TaskRun {
    pub built: BuiltTask,
    pub predictions: Vec<Prediction>,
    pub build_s: f64,
    pub infer_s: f64,
}

/// Predicts every built task on up to `threads` workers.
pub fn run_tasks(
    ckpt: &ModelCheckpoint,
    built: Vec<(BuiltTask, f64)>,
    threads: usize,
) -> Result<Vec<TaskRun>, CliError> {
    let results = par_map(&built, threads, |(b, _)| {
        let (preds, s) = timeit(|| predict_task(ckpt, b));
        preds.map(|p| (p, s))
    });
    built
        .into_iter()
        .zip(results)
        .map(|((built, build_s), r)| {
            let (predictions, infer_s) = r?;
            Ok(TaskRun { built, predictions, build_s, infer_s })
        })
        .collect()
}

fn network_runtime(runs: &[TaskRun]) -> (Runtime, Vec<TaskTiming>) {
    let build: f64 = runs.iter().map(|r| r.build_s).sum();
    let infer: f64 = runs.iter().map(|r| r.infer_s).sum();
    let tasks = runs.iter().map(|r| TaskTiming { task: r.built.meta.id.clone(), seconds: r.build_s + r.infer_s }).collect();
    (Runtime::Network { context_build_s: build, inference_s: infer }, tasks)
}

/// Reports, the manifest task list and the count of network forward calls.
#[derive(Debug, Default)]
pub struct BenchOutput {
    pub reports: Vec<MetricReport>,
    pub tasks: Vec<TaskMeta>,
    pub predict_calls: usize,
}

fn hbm_points(
    spec: &HBMSpec,
    context: &[&BoreholeRecord],
    queries: &[&BoreholeRecord],
    target: Param,
    truth: &TruthIndex<'_>,
    group: impl Fn(&BoreholeRecord) -> String,
) -> Result<(Vec<PointResult>, f64, f64), CliError> {
    let (post, fit_s) = timeit(|| fit(spec, context, target));
    let post = post?;
    let (preds, infer_s) = timeit(|| post.predict(queries));
    let mut points = Vec::with_capacity(queries.len());
    for (r, p) in queries.iter().zip(&preds) {
        let key = RowKey { site_id: r.site_id.clone(), borehole_id: r.borehole_id.clone(), depth: r.depth };
        points.push(PointResult::new(group(r), r.borehole_id.clone(), r.depth, truth.value(&key, target)?, p));
    }
    Ok((points, fit_s, infer_s))
}

fn network_points(runs: &[TaskRun], truth: &TruthIndex<'_>, group: impl Fn(&TaskRun, &RowKey) -> String) -> Result<Vec<PointResult>, CliError> {
    let mut points = Vec::new();
    for run in runs {
        let target = run.built.meta.target;
        for (key, p) in run.built.test_keys.iter().zip(&run.predictions) {
            points.push(PointResult::new(group(run, key), key.borehole_id.clone(), key.depth, truth.value(key, target)?, p));
        }
    }
    Ok(points)
}

/// Profile prediction at the verification site: network runs per scenario
/// and BID, the baseline per BID.
pub fn run_bench1(cfg: &Bench1Config, ckpt: &ModelCheckpoint, threads: usize, manifest: &str) -> Result<BenchOutput, CliError> {
    let world = bench1_world(&cfg.world, cfg.view)?;
    let bids: Vec<&BidSource> = if cfg.bids.is_empty() {
        world.bids.iter().collect()
    } else {
        cfg.bids
            .iter()
            .map(|want| {
                world.bids.iter().find(|b| b.label() == want).ok_or_else(|| {
                    let known: Vec<&str> = world.bids.iter().map(BidSource::label).collect();
                    CliError::Usage(format!("unknown BID {want:?}; this world has {known:?}"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let site = &world.verification;
    let truth = TruthIndex::new(&world.verification_truth);
    let codes = CodeBook::from_tables(&[site, &world.local_bid, &world.global_bid]);
    let trunc = Some(truncation_for(ckpt, cfg.max_context_rows, cfg.truncation_seed));
    let key = |method: &str, scenario: &str, bid: &str| ReportKey {
        benchmark: "bench1".into(),
        method: method.into(),
        scenario: scenario.into(),
        bid: bid.into(),
    };
    let mut out = BenchOutput::default();

    for &scenario in &cfg.scenarios {
        for bid in &bids {
            let mut built = Vec::new();
            match scenario {
                Scenario::Individual => {
                    for t in &world.targets {
                        let (tasks, s) = timeit(|| {
                            individual_tasks(std::slice::from_ref(*bid), site, std::slice::from_ref(t), cfg.view, cfg.target, &codes, trunc)
                        });
                        built.extend(tasks?.into_iter().map(|b| (b, s)));
                    }
                }
                Scenario::Simultaneous => {
                    if bid.site_wide().is_none() {
                        continue;
                    }
                    let (tasks, s) = timeit(|| {
                        simultaneous_tasks(std::slice::from_ref(*bid), site, &world.targets, cfg.view, cfg.target, &codes, trunc)
                    });
                    built.extend(tasks?.into_iter().map(|b| (b, s)));
                }
                Scenario::Imputation => {
                    return Err(CliError::Usage("bench1 runs the individual and simultaneous scenarios".into()));
                }
            }
            out.tasks.extend(built.iter().map(|(b, _)| b.meta.clone()));
            let runs = run_tasks(ckpt, built, threads)?;
            out.predict_calls += runs.len();
            let points = network_points(&runs, &truth, |_, k| k.borehole_id.clone())?;
            let (runtime, tasks) = network_runtime(&runs);
            let scenario_name = if scenario == Scenario::Individual { "individual" } else { "simultaneous" };
            out.reports.push(MetricReport::from_points(key("PFN", scenario_name, bid.label()), points, runtime, tasks, manifest)?);
        }
    }

    // The baseline fits once per distinct context table.
    for bid in &bids {
        let mut points = Vec::new();
        let (mut fit_s, mut infer_s) = (0.0, 0.0);
        let groups: Vec<(Vec<&String>, &SiteTable)> = match bid.site_wide() {
            Some(t) => vec![(world.targets.iter().collect(), t)],
            None => world.targets.iter().map(|t| bid.for_borehole(t).map(|tab| (vec![t], tab))).collect::<Result<_, _>>()?,
        };
        for (targets, table) in groups {
            let context: Vec<&BoreholeRecord> = table
                .records()
                .iter()
                .chain(site.records())
                .filter(|r| r.get(cfg.target).is_some())
                .collect();
            let queries: Vec<&BoreholeRecord> = targets
                .iter()
                .flat_map(|t| site.borehole(t))
                .filter(|r| r.get(cfg.target).is_none())
                .collect();
            let (p, f, i) = hbm_points(&cfg.hbm, &context, &queries, cfg.target, &truth, |r| r.borehole_id.clone())?;
            points.extend(p);
            fit_s += f;
            infer_s += i;
        }
        let runtime = Runtime::Baseline { fit_s, inference_s: infer_s };
        out.reports.push(MetricReport::from_points(key("HBM", "baseline", bid.label()), points, runtime, Vec::new(), manifest)?);
    }
    Ok(out)
}

/// Imputation at the verification site: one network task per (pattern,
/// missing parameter), one baseline fit per missing parameter.
pub fn run_bench2(cfg: &Bench2Config, ckpt: &ModelCheckpoint, threads: usize, manifest: &str) -> Result<BenchOutput, CliError> {
    let world = bench1_world(&cfg.world, View::Eleven)?;
    let bid = world
        .bids
        .iter()
        .filter_map(BidSource::site_wide)
        .find(|t| t.label == cfg.bid)
        .ok_or_else(|| {
            let known: Vec<&str> = world.bids.iter().filter_map(BidSource::site_wide).map(|t| t.label.as_str()).collect();
            CliError::Usage(format!("bench2 needs a site-wide BID; {:?} is not one of {known:?}", cfg.bid))
        })?;
    let (problem, truth_table) = bench2_problem(&world.verification_truth)?;
    let truth = TruthIndex::new(&truth_table);
    let codes = CodeBook::from_tables(&[&problem, bid]);
    let trunc = Some(truncation_for(ckpt, cfg.max_context_rows, cfg.truncation_seed));
    let mut out = BenchOutput::default();

    let mut built = Vec::new();
    let patterns = detect_patterns(problem.records());
    for pattern in &patterns {
        for &target in &pattern.missing {
            let spec = ContextSpec {
                bid: bid.clone(),
                features: View::Eleven.features(target),
                target,
                scenario: Scenario::Imputation,
                boreholes: Vec::new(),
                codes: codes.clone(),
                truncation: trunc,
            };
            let (task, s) = timeit(|| build_imputation(&spec, &problem, pattern));
            built.push((task?, s));
        }
    }
    out.tasks.extend(built.iter().map(|(b, _)| b.meta.clone()));
    let runs = run_tasks(ckpt, built, threads)?;
    out.predict_calls = runs.len();
    let mut points = network_points(&runs, &truth, |run, _| run.built.meta.target.name().to_string())?;
    sort_by_param(&mut points);
    let (runtime, tasks) = network_runtime(&runs);
    let key = |method: &str, scenario: &str| ReportKey {
        benchmark: "bench2".into(),
        method: method.into(),
        scenario: scenario.into(),
        bid: bid.label.clone(),
    };
    out.reports.push(MetricReport::from_points(key("PFN", "imputation"), points, runtime, tasks, manifest)?);

    let mut points = Vec::new();
    let (mut fit_s, mut infer_s) = (0.0, 0.0);
    for p in Param::MECHANICAL {
        let queries: Vec<&BoreholeRecord> = problem.records().iter().filter(|r| r.get(p).is_none()).collect();
        if queries.is_empty() {
            continue;
        }
        let context: Vec<&BoreholeRecord> =
            bid.records().iter().chain(problem.records()).filter(|r| r.get(p).is_some()).collect();
        let (pts, f, i) = hbm_points(&cfg.hbm, &context, &queries, p, &truth, |_| p.name().to_string())?;
        points.extend(pts);
        fit_s += f;
        infer_s += i;
    }
    let runtime = Runtime::Baseline { fit_s, inference_s: infer_s };
    out.reports.push(MetricReport::from_points(key("HBM", "baseline"), points, runtime, Vec::new(), manifest)?);
    Ok(out)
}

fn sort_by_param(points: &mut [PointResult]) {
    points.sort_by_key(|p| Param::from_name(&p.group).map_or(usize::MAX, Param::index));
}

/// A filled site table plus one row per imputed cell.
pub struct Imputed {
    pub filled: SiteTable,
    pub cells: Vec<ImputedCell>,
    pub tasks: Vec<TaskMeta>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ImputedCell {
    pub site_id: String,
    pub borehole_id: String,
    pub depth: f64,
    pub param: &'static str,
    pub mean: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

/// Fills every missing mechanical cell of `site` with its predictive mean.
///
/// With an external BID, the site's observed cells are site-specific context
/// and are never dropped. Without one, the site is its own BID: each task's
/// problem table is just the pattern's records, so every context row may be
/// subsampled to fit the row budget.
pub fn impute_site(
    site: &SiteTable,
    bid: Option<&SiteTable>,
    view: View,
    ckpt: &ModelCheckpoint,
    trunc: Truncation,
    threads: usize,
) -> Result<Imputed, CliError> {
    let codes = match bid {
        Some(b) => CodeBook::from_tables(&[site, b]),
        None => CodeBook::from_tables(&[site]),
    };
    let patterns = detect_patterns(site.records());
    let mut built = Vec::new();
    for pattern in &patterns {
        let (context, problem, local) = match bid {
            Some(b) => (b.clone(), site.clone(), pattern.clone()),
            None => {
                let records = pattern.records.iter().map(|&i| site.records()[i].clone()).collect();
                let problem = SiteTable::new(format!("{}:{}", site.label, pattern.label()), records)?;
                let local = MissingnessPattern { missing: pattern.missing.clone(), records: (0..pattern.records.len()).collect() };
                (site.clone(), problem, local)
            }
        };
        for &target in &pattern.missing {
            let spec = ContextSpec {
                bid: context.clone(),
                features: view.features(target),
                target,
                scenario: Scenario::Imputation,
                boreholes: Vec::new(),
                codes: codes.clone(),
                truncation: Some(trunc),
            };
            built.push((build_imputation(&spec, &problem, &local)?, 0.0));
        }
    }
    let tasks = built.iter().map(|(b, _)| b.meta.clone()).collect();
    let runs = run_tasks(ckpt, built, threads)?;

    let mut records = site.records().to_vec();
    let index: HashMap<TruthKey, usize> =
        records.iter().enumerate().map(|(i, r)| (truth_key(&r.site_id, &r.borehole_id, r.depth), i)).collect();
    let mut cells = Vec::new();
    for run in &runs {
        let target = run.built.meta.target;
        for (key, p) in run.built.test_keys.iter().zip(&run.predictions) {
            let i = index[&truth_key(&key.site_id, &key.borehole_id, key.depth)];
            records[i].set(target, Some(p.mean));
            cells.push(ImputedCell {
                site_id: key.site_id.clone(),
                borehole_id: key.borehole_id.clone(),
                depth: key.depth,
                param: target.name(),
                mean: p.mean,
                q025: p.q025,
                q500: p.q500,
                q975: p.q975,
            });
        }
    }
    // Filled values may break PL ≤ LL; those two are never imputed, so the
    // table stays valid.
    let filled = SiteTable::new(format!("{}:imputed", site.label), records)?;
    Ok(Imputed { filled, cells, tasks })
}

/// Network RMSE on the two-region site's hidden shear strengths, with the
/// matched-region BID and with the mismatched one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoRegionScore {
    pub matched: f64,
    pub mismatched: f64,
}

pub fn two_region_score(ckpt: &ModelCheckpoint, seed: u64, bid_boreholes: usize) -> Result<TwoRegionScore, CliError> {
    let world = two_region_world(seed, bid_boreholes)?;
    let truth = TruthIndex::new(&world.target_truth);
    let codes = CodeBook::from_tables(&[&world.target_site]);
    let trunc = Some(truncation_for(ckpt, None, seed));
    let score = |bid: &SiteTable| -> Result<f64, CliError> {
        let source = BidSource::Table(bid.clone());
        let built = individual_tasks(
            std::slice::from_ref(&source),
            &world.target_site,
            std::slice::from_ref(&world.target),
            View::Four,
            Param::Su,
            &codes,
            trunc,
        )?;
        let runs = run_tasks(ckpt, built.into_iter().map(|b| (b, 0.0)).collect(), 1)?;
        let points = network_points(&runs, &truth, |_, k| k.borehole_id.clone())?;
        let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
        let truths: Vec<f64> = points.iter().map(|p| p.truth).collect();
        Ok(geopfn::eval::rmse(&means, &truths)?)
    };
    Ok(TwoRegionScore { matched: score(&world.matched)?, mismatched: score(&world.mismatched)? })
}
