use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geopfn::context::{Scenario, View};
use geopfn::eval::{self, write_atomic, MetricReport, ReportOptions};
use geopfn::geodata::{generate_site_with_truth, load_csv, write_csv, SiteTable};
use geopfn::model::ModelCheckpoint;
use geopfn::train::{train, TrainEvent};

use crate::config::{Overrides, PretrainConfig, RunConfig};
use crate::drivers::{impute_site, run_bench1, run_bench2, truncation_for, worker_count, BenchOutput};
use crate::error::CliError;
use crate::manifest::{FileDigest, Manifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "geopfn", version, about = "Pretrain, benchmark and apply a tabular PFN to borehole data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on synthetic tasks and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Use the 200-step smoke recipe instead of the config block.
        #[arg(long)]
        smoke: bool,
    },
    /// Write a synthetic site as CSV, as observed and complete.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Profile prediction at the verification site across BIDs.
    Bench1 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Imputation of engineered missingness patterns.
    Bench2 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fill the missing mechanical cells of a site CSV.
    Impute {
        #[command(flatten)]
        common: CommonArgs,
        /// Site CSV to fill; overrides the config.
        #[arg(long)]
        input: Option<PathBuf>,
        /// BID CSV used as context; overrides the config.
        #[arg(long = "bid-csv")]
        bid_csv: Option<PathBuf>,
    },
    /// Merge report.json files and re-render tables and plots.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// report.json files written by bench1 or bench2.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run config JSON, or a manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretrained checkpoint (model.ckpt from `pretrain`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// BID label, e.g. Local-BID/4.
    #[arg(long)]
    pub bid: Option<String>,
    /// Feature view: 4 or 11.
    #[arg(long, value_parser = parse_view)]
    pub view: Option<View>,
    /// individual or simultaneous.
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
}

fn parse_view(s: &str) -> Result<View, String> {
    s.parse::<View>().map_err(|e| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    match s {
        "individual" => Ok(Scenario::Individual),
        "simultaneous" => Ok(Scenario::Simultaneous),
        other => Err(format!("unknown scenario {other:?}; expected individual or simultaneous")),
    }
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            checkpoint: self.checkpoint.clone(),
            bid: self.bid.clone(),
            view: self.view,
            scenario: self.scenario,
        });
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(ModelCheckpoint, FileDigest), CliError> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| CliError::Usage("a checkpoint is required (--checkpoint)".into()))?;
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = ModelCheckpoint::load(path).map_err(|source| CliError::Checkpoint { path: path.clone(), source })?;
    Ok((ckpt, FileDigest::of(path)?))
}

fn csv_bytes(table: &SiteTable) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    Ok(buf)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common, smoke } => pretrain(&common, smoke),
        Command::Synth { common } => synth(&common),
        Command::Bench1 { common } => bench(&common, 1),
        Command::Bench2 { common } => bench(&common, 2),
        Command::Impute { common, input, bid_csv } => impute(&common, input, bid_csv),
        Command::Report { common, inputs } => report(&common, &inputs),
    }
}

fn pretrain(common: &CommonArgs, smoke: bool) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    if smoke {
        let seed_prior = cfg.pretrain.prior.seed;
        let seed_train = cfg.pretrain.train.seed;
        cfg.pretrain = PretrainConfig::smoke();
        cfg.pretrain.prior.seed = seed_prior;
        cfg.pretrain.train.seed = seed_train;
    }
    let out = &common.out;
    create_dir(out)?;
    let p = &cfg.pretrain;
    let ckpt_every_dir = out.clone();
    let mut save_err = None;
    let budget = p.train.steps * p.train.tasks_per_step;
    let header = serde_json::json!({
        "budget_tasks": budget,
        "steps": p.train.steps,
        "tasks_per_step": p.train.tasks_per_step,
        "scale": "desk-scale pretraining budget",
    });
    eprintln!("pretraining budget: {budget} tasks ({} steps x {} tasks), desk scale", p.train.steps, p.train.tasks_per_step);
    let outcome = train(&p.prior, &p.model, &p.bins, &p.train, |ev| match ev {
        TrainEvent::Log(r) => {
            eprintln!("step {:>6}  train_nll {:.4}  val_nll {:.4}  {:.1}s", r.step, r.train_nll, r.val_nll, r.wallclock_s)
        }
        TrainEvent::Checkpoint { step, checkpoint } => {
            let path = ckpt_every_dir.join(format!("model-step{step}.ckpt"));
            if let Err(source) = checkpoint.save(&path) {
                save_err.get_or_insert(CliError::Checkpoint { path, source });
            }
        }
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    let ckpt_path = out.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path).map_err(|source| CliError::Checkpoint { path: ckpt_path.clone(), source })?;
    let mut log = Vec::new();
    writeln!(log, "{header}").expect("writing to memory");
    for r in &outcome.log {
        let rec = serde_json::json!({ "step": r.step, "train_nll": r.train_nll, "val_nll": r.val_nll, "wallclock_s": r.wallclock_s });
        writeln!(log, "{rec}").expect("writing to memory");
    }
    write_atomic(&out.join("train_log.ndjson"), &log)?;

    let mut m = Manifest::new("pretrain", &cfg);
    m.seed("prior", p.prior.seed);
    m.seed("train", p.train.seed);
    m.checkpoint = Some(FileDigest::of(&ckpt_path)?);
    m.outputs = vec!["model.ckpt".into(), "train_log.ndjson".into()];
    m.write(out)?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.val_nll);
    println!("final validation NLL {last:.4} after {} tasks", outcome.total_tasks);
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn synth(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    create_dir(&common.out)?;
    let (observed, complete) = generate_site_with_truth(&cfg.synth.site)?;
    write_atomic(&common.out.join("site.csv"), &csv_bytes(&observed)?)?;
    write_atomic(&common.out.join("site_complete.csv"), &csv_bytes(&complete)?)?;
    let mut m = Manifest::new("synth", &cfg);
    m.seed("site", cfg.synth.site.seed);
    m.outputs = vec!["site.csv".into(), "site_complete.csv".into()];
    m.write(&common.out)?;
    println!("{} records in {} boreholes -> {}", observed.len(), observed.borehole_ids().len(), common.out.display());
    Ok(())
}

fn bench(common: &CommonArgs, which: u8) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let (ckpt, digest) = load_checkpoint(&cfg)?;
    create_dir(&common.out)?;
    let threads = worker_count();
    let manifest_ref = common.out.join(MANIFEST_FILE).display().to_string();
    let (command, out, plots): (&str, BenchOutput, bool) = if which == 1 {
        ("bench1", run_bench1(&cfg.bench1, &ckpt, threads, &manifest_ref)?, cfg.bench1.plots)
    } else {
        ("bench2", run_bench2(&cfg.bench2, &ckpt, threads, &manifest_ref)?, cfg.bench2.plots)
    };
    let written = eval::report(&out.reports, &common.out, ReportOptions { plots })?;

    let mut m = Manifest::new(command, &cfg);
    if which == 1 {
        m.seed("world", cfg.bench1.world.seed);
        m.seed("hbm", cfg.bench1.hbm.seed);
        m.seed("truncation", cfg.bench1.truncation_seed);
    } else {
        m.seed("world", cfg.bench2.world.seed);
        m.seed("hbm", cfg.bench2.hbm.seed);
        m.seed("truncation", cfg.bench2.truncation_seed);
    }
    m.checkpoint = Some(digest);
    m.tasks = out.tasks;
    m.outputs = written.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect();
    m.write(&common.out)?;

    println!("{command}: {} tasks, {} network calls", m.tasks.len(), out.predict_calls);
    for r in &out.reports {
        println!(
            "  {:<4} {:<13} {:<16} rmse {:>9.4}  coverage {:.3}  n {}",
            r.method, r.scenario, r.bid, r.pooled.rmse, r.pooled.coverage, r.pooled.n
        );
    }
    print!("{}", fs::read_to_string(common.out.join("runtime.md")).unwrap_or_default());
    Ok(())
}

fn impute(common: &CommonArgs, input: Option<PathBuf>, bid_csv: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    if input.is_some() {
        cfg.impute.input = input;
    }
    if bid_csv.is_some() {
        cfg.impute.bid = bid_csv;
    }
    let (ckpt, digest) = load_checkpoint(&cfg)?;
    let input = cfg.impute.input.clone().ok_or_else(|| CliError::Usage("impute needs an input CSV (--input)".into()))?;
    let site = load_csv(&input)?;
    let mut inputs = vec![FileDigest::of(&input)?];
    let bid = match &cfg.impute.bid {
        Some(path) => {
            inputs.push(FileDigest::of(path)?);
            Some(load_csv(path)?)
        }
        None => None,
    };
    let view = cfg.impute.view.unwrap_or(View::Eleven);
    let trunc = truncation_for(&ckpt, cfg.impute.max_context_rows, cfg.impute.truncation_seed);
    create_dir(&common.out)?;
    let imputed = impute_site(&site, bid.as_ref(), view, &ckpt, trunc, worker_count())?;

    write_atomic(&common.out.join("imputed.csv"), &csv_bytes(&imputed.filled)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &imputed.cells {
        w.serialize(c).map_err(geopfn::eval::EvalError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io { path: common.out.join("imputations.csv"), source: e.into_error() })?;
    write_atomic(&common.out.join("imputations.csv"), &bytes)?;

    let mut m = Manifest::new("impute", &cfg);
    m.seed("truncation", cfg.impute.truncation_seed);
    m.checkpoint = Some(digest);
    m.inputs = inputs;
    m.tasks = imputed.tasks;
    m.outputs = vec!["imputed.csv".into(), "imputations.csv".into()];
    m.write(&common.out)?;
    println!("imputed {} cells with {} network calls", imputed.cells.len(), m.tasks.len());
    Ok(())
}

fn report(common: &CommonArgs, inputs: &[PathBuf]) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut digests = Vec::new();
    for path in inputs {
        if !path.exists() {
            return Err(CliError::Usage(format!("report input {} does not exist", path.display())));
        }
        reports.extend(eval::load_reports(path)?);
        digests.push(FileDigest::of(path)?);
    }
    let written = eval::report(&reports, &common.out, ReportOptions { plots: true })?;
    let mut m = Manifest::new("report", &cfg);
    m.inputs = digests;
    m.outputs = written.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect();
    m.write(&common.out)?;
    println!("{} reports -> {}", reports.len(), common.out.display());
    Ok(())
}
