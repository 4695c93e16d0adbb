use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geopfn::baseline::HBMSpec;
use geopfn::eval::MetricReport;
use geopfn::model::{BinStrategy, ModelCheckpoint, ModelConfig};
use geopfn::prior::PriorConfig;
use geopfn_cli::config::{quick_world, PretrainConfig, RunConfig};
use geopfn_cli::manifest::Manifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geopfn"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).env("PFN_SITE_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Untrained but well-formed: enough to exercise the plumbing.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let model = ModelConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_hidden: 8,
        n_bins: 16,
        dropout_rate: 0.0,
        max_features: 16,
        max_rows: 160,
    };
    let prior = PriorConfig { max_features: 14, max_rows: 160, ..PriorConfig::default() };
    let ckpt = ModelCheckpoint::new(model, prior, BinStrategy::EqualMass, model.init_weights(3)).unwrap();
    let path = dir.join("tiny.ckpt");
    ckpt.save(&path).unwrap();
    path
}

fn quick_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    let hbm = HBMSpec { burn_in: 100, draws: 200, ..HBMSpec::default() };
    cfg.bench1.world = quick_world();
    cfg.bench1.hbm = hbm.clone();
    cfg.bench1.plots = false;
    cfg.bench2.world = quick_world();
    cfg.bench2.hbm = hbm;
    cfg.synth.site.zones[0].n_boreholes = 6;
    let mut p = PretrainConfig::smoke();
    p.model = ModelConfig { embed_dim: 8, n_layers: 1, n_heads: 2, mlp_hidden: 8, n_bins: 16, dropout_rate: 0.0, max_features: 16, max_rows: 128 };
    p.train.steps = 6;
    p.train.tasks_per_step = 2;
    p.train.schedule.warmup_steps = 2;
    p.train.log_every = 3;
    p.train.val_tasks = 2;
    cfg.pretrain = p;
    let path = dir.join("quick.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    ckpt: String,
    config: String,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let ckpt = tiny_checkpoint(&dir).display().to_string();
    let config = quick_config(&dir).display().to_string();
    Fixture { _tmp: tmp, dir, ckpt, config }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let f = fixture();
    let o = run(&["synth", "--config", "no/such/config.json", "--out", "o"], &f.dir);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("no/such/config.json"));
}

#[test]
fn usage_errors_exit_2() {
    let f = fixture();
    assert_eq!(code(&run(&["bench1", "--view", "7"], &f.dir)), 2);
    assert_eq!(code(&run(&["bench1", "--scenario", "sideways"], &f.dir)), 2);
    let o = run(&["bench1", "--config", &f.config, "--out", "o"], &f.dir);
    assert_eq!(code(&o), 2, "no checkpoint: {}", stderr(&o));
    let o = run(&["bench1", "--config", &f.config, "--checkpoint", &f.ckpt, "--bid", "Nope", "--out", "o"], &f.dir);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn data_errors_exit_3() {
    let f = fixture();
    let bad = f.dir.join("bad.csv");
    fs::write(
        &bad,
        "site_id,borehole_id,x,y,depth,Sr,gamma_t,e,LL,PL,w,su,Eu,sigma_p,Cc,cv\nS,B1,0,0,1,90,16,1.5,50,60,40,,,,,\n",
    )
    .unwrap();
    let o = run(&["impute", "--config", &f.config, "--checkpoint", &f.ckpt, "--input", "bad.csv", "--out", "o"], &f.dir);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn capacity_errors_exit_4() {
    let f = fixture();
    let mut cfg = RunConfig::load(Path::new(&f.config)).unwrap();
    cfg.bench1.max_context_rows = Some(4);
    let path = f.dir.join("tight.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = run(&["bench1", "--config", "tight.json", "--checkpoint", &f.ckpt, "--out", "o"], &f.dir);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn bench1_counts_tables_and_reruns_from_its_manifest() {
    let f = fixture();
    let o = run(&["bench1", "--config", &f.config, "--checkpoint", &f.ckpt, "--out", "a"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = Manifest::load(&f.dir.join("a/manifest.json")).unwrap();
    let individual = m.tasks.iter().filter(|t| t.id.starts_with("individual:")).count();
    let simultaneous = m.tasks.iter().filter(|t| t.id.starts_with("simultaneous:")).count();
    assert_eq!((individual, simultaneous), (20, 3));

    let md = String::from_utf8(read(f.dir.join("a/runtime.md"))).unwrap();
    let rows: Vec<&str> = md.lines().filter(|l| l.contains(" | HBM ")).collect();
    assert_eq!(rows.len(), 4, "{md}");
    assert!(rows.iter().all(|r| r.contains(" | individual ") && r.contains(" | simultaneous ")));

    // Flags recorded in the manifest, then a rerun from it alone.
    let o = run(&["bench1", "--config", "a/manifest.json", "--out", "b"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["metrics.csv", "points.csv"] {
        assert_eq!(read(f.dir.join("a").join(name)), read(f.dir.join("b").join(name)), "{name}");
    }
    assert_eq!(read(f.dir.join("a/manifest.json")).len(), read(f.dir.join("b/manifest.json")).len());
}

#[test]
fn worker_count_does_not_change_results() {
    let f = fixture();
    for (threads, out) in [("1", "t1"), ("3", "t3")] {
        let o = bin()
            .args(["bench1", "--config", &f.config, "--checkpoint", &f.ckpt, "--scenario", "individual", "--out", out])
            .current_dir(&f.dir)
            .env("PFN_SITE_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(read(f.dir.join("t1/points.csv")), read(f.dir.join("t3/points.csv")));
}

#[test]
fn bench2_runs_fourteen_tasks_and_a_five_row_table() {
    let f = fixture();
    let o = run(&["bench2", "--config", &f.config, "--checkpoint", &f.ckpt, "--out", "a"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("14 network calls"));
    let m = Manifest::load(&f.dir.join("a/manifest.json")).unwrap();
    assert_eq!(m.tasks.len(), 14);

    let reports: Vec<MetricReport> = serde_json::from_slice(&read(f.dir.join("a/report.json"))).unwrap();
    let pfn = reports.iter().find(|r| r.method == "PFN").unwrap();
    let names: Vec<&str> = pfn.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(names, ["su", "Eu", "sigma_p", "Cc", "cv"]);
    let hbm = reports.iter().find(|r| r.method == "HBM").unwrap();
    assert_eq!(hbm.groups.len(), 5);
    let total = pfn.runtime.total();
    assert!((pfn.task_seconds_total() - total).abs() <= 0.01 * total);
    let md = String::from_utf8(read(f.dir.join("a/runtime.md"))).unwrap();
    assert!(md.lines().any(|l| l.starts_with("HBM ") && l.contains(" / PFN-total ")), "{md}");

    let o = run(&["bench2", "--config", "a/manifest.json", "--out", "b"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(f.dir.join("a/metrics.csv")), read(f.dir.join("b/metrics.csv")));
}

#[test]
fn synth_and_impute_round_trip() {
    let f = fixture();
    let o = run(&["synth", "--config", &f.config, "--seed", "5", "--out", "s"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["synth", "--config", "s/manifest.json", "--out", "s2"], &f.dir);
    assert_eq!(code(&o), 0);
    assert_eq!(read(f.dir.join("s/site.csv")), read(f.dir.join("s2/site.csv")));

    let o = run(&["impute", "--config", &f.config, "--checkpoint", &f.ckpt, "--input", "s/site.csv", "--out", "i"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let filled = geopfn::geodata::load_csv(&f.dir.join("i/imputed.csv")).unwrap();
    assert!(filled.records().iter().all(|r| r.missing_mechanical().is_empty()));
    let o = run(&["impute", "--config", "i/manifest.json", "--out", "i2"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(f.dir.join("i/imputations.csv")), read(f.dir.join("i2/imputations.csv")));
}

#[test]
fn impute_without_a_bid_subsamples_a_large_site() {
    let f = fixture();
    // The default synthetic site has several hundred rows, past the tiny model's 160.
    let o = run(&["synth", "--out", "big"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["impute", "--config", &f.config, "--checkpoint", &f.ckpt, "--input", "big/site.csv", "--out", "i"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = Manifest::load(&f.dir.join("i/manifest.json")).unwrap();
    assert!(m.tasks.iter().any(|t| t.subsample_seed.is_some()));
    assert!(m.tasks.iter().all(|t| t.n_train <= 160 && t.site_train_rows == 0));
    let filled = geopfn::geodata::load_csv(&f.dir.join("i/imputed.csv")).unwrap();
    assert!(filled.records().iter().all(|r| r.missing_mechanical().is_empty()));
}

#[test]
fn pretrain_is_deterministic() {
    let f = fixture();
    for out in ["p1", "p2"] {
        let o = run(&["pretrain", "--config", &f.config, "--seed", "9", "--out", out], &f.dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("final validation NLL"));
    }
    let a = Manifest::load(&f.dir.join("p1/manifest.json")).unwrap();
    let b = Manifest::load(&f.dir.join("p2/manifest.json")).unwrap();
    assert_eq!(a.checkpoint.unwrap().sha256, b.checkpoint.unwrap().sha256);
    assert_eq!(log_without_clock(&f.dir.join("p1/train_log.ndjson")), log_without_clock(&f.dir.join("p2/train_log.ndjson")));
    let text = String::from_utf8(read(f.dir.join("p1/train_log.ndjson"))).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["budget_tasks"], 12);
    assert!(text.lines().skip(1).all(|l| l.contains("\"wallclock_s\"")));
}

fn log_without_clock(path: &Path) -> Vec<serde_json::Value> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wallclock_s");
            v
        })
        .collect()
}

#[test]
fn report_merges_runs() {
    let f = fixture();
    let o = run(&["bench1", "--config", &f.config, "--checkpoint", &f.ckpt, "--scenario", "individual", "--bid", "Local-BID/4", "--out", "a"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["bench2", "--config", &f.config, "--checkpoint", &f.ckpt, "--out", "b"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["report", "a/report.json", "b/report.json", "--out", "r"], &f.dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports: Vec<MetricReport> = serde_json::from_slice(&read(f.dir.join("r/report.json"))).unwrap();
    assert_eq!(reports.len(), 4);
    assert!(fs::read_dir(f.dir.join("r")).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
    let o = run(&["report", "a/report.json", "a/report.json", "--out", "r2"], &f.dir);
    assert_eq!(code(&o), 1, "duplicate runs conflict: {}", stderr(&o));
}
