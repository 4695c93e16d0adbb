//! Run configuration: one JSON file with a block per subcommand. Flags
//! override the file; the resolved result goes into every manifest.

use std::fs;
use std::path::{Path, PathBuf};

use geopfn::baseline::HBMSpec;
use geopfn::context::{Scenario, View, WorldConfig};
use geopfn::geodata::{Param, SynthSiteConfig};
use geopfn::model::{BinStrategy, ModelConfig};
use geopfn::prior::{IntRange, PriorConfig};
use geopfn::train::{LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub prior: PriorConfig,
    pub model: ModelConfig,
    pub bins: BinStrategy,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    /// Sized for site tables: up to 14 features (coordinates, depth, ten
    /// parameters and a borehole code) and 128 rows.
    fn default() -> Self {
        Self {
            prior: PriorConfig { max_features: 14, min_rows: 16, max_rows: 128, ..PriorConfig::default() },
            model: ModelConfig {
                embed_dim: 32,
                n_layers: 3,
                n_heads: 4,
                mlp_hidden: 64,
                n_bins: 48,
                dropout_rate: 0.0,
                max_features: 16,
                max_rows: 512,
            },
            bins: BinStrategy::EqualMass,
            train: TrainConfig {
                steps: 4000,
                tasks_per_step: 8,
                schedule: LrSchedule { peak: 2e-3, warmup_steps: 200, final_fraction: 0.05 },
                clip_norm: 1.0,
                seed: 0,
                checkpoint_every: 0,
                val_tasks: 64,
                log_every: 250,
            },
        }
    }
}

impl PretrainConfig {
    /// Two hundred steps of the default recipe.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.train.steps = 200;
        cfg.train.schedule.warmup_steps = 20;
        cfg.train.log_every = 50;
        cfg.train.val_tasks = 16;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub site: SynthSiteConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { site: SynthSiteConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bench1Config {
    pub world: WorldConfig,
    pub view: View,
    pub target: Param,
    pub scenarios: Vec<Scenario>,
    /// Restrict to these BID labels; empty runs all of them.
    pub bids: Vec<String>,
    pub hbm: HBMSpec,
    /// Seeds BID subsampling when a context overflows the row budget.
    pub truncation_seed: u64,
    /// Context row budget; `None` uses the checkpoint's pretraining row cap.
    pub max_context_rows: Option<usize>,
    pub plots: bool,
}

impl Default for Bench1Config {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            view: View::Four,
            target: Param::Su,
            scenarios: vec![Scenario::Individual, Scenario::Simultaneous],
            bids: Vec::new(),
            hbm: HBMSpec::default(),
            truncation_seed: 0,
            max_context_rows: None,
            plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bench2Config {
    pub world: WorldConfig,
    /// Which site-wide BID of the world supplies context.
    pub bid: String,
    pub hbm: HBMSpec,
    pub truncation_seed: u64,
    pub max_context_rows: Option<usize>,
    pub plots: bool,
}

impl Default for Bench2Config {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            bid: "Local-BID/11".into(),
            hbm: HBMSpec::default(),
            truncation_seed: 0,
            max_context_rows: None,
            plots: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    /// Site CSV whose empty cells get filled.
    pub input: Option<PathBuf>,
    /// BID CSV supplying context; none means the site alone.
    pub bid: Option<PathBuf>,
    pub view: Option<View>,
    pub truncation_seed: u64,
    pub max_context_rows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides every seed below.
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub synth: SynthConfig,
    pub bench1: Bench1Config,
    pub bench2: Bench2Config,
    pub impute: ImputeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            checkpoint: None,
            pretrain: PretrainConfig::default(),
            synth: SynthConfig::default(),
            bench1: Bench1Config::default(),
            bench2: Bench2Config::default(),
            impute: ImputeConfig::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub bid: Option<String>,
    pub view: Option<View>,
    pub scenario: Option<Scenario>,
}

impl RunConfig {
    /// Reads a run config, or the `config` block of a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let config_err = |message: String| CliError::Config { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
        let value = match value.get("manifest_version") {
            Some(_) => value.get("config").cloned().ok_or_else(|| config_err("manifest without a config block".into()))?,
            None => value,
        };
        serde_json::from_value(value).map_err(|e| config_err(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.pretrain.prior.seed = seed;
            self.pretrain.train.seed = seed;
            self.synth.site.seed = seed;
            self.bench1.world.seed = seed;
            self.bench1.hbm.seed = seed;
            self.bench1.truncation_seed = seed;
            self.bench2.world.seed = seed;
            self.bench2.hbm.seed = seed;
            self.bench2.truncation_seed = seed;
            self.impute.truncation_seed = seed;
        }
        if let Some(c) = &o.checkpoint {
            self.checkpoint = Some(c.clone());
        }
        if let Some(b) = &o.bid {
            self.bench1.bids = vec![b.clone()];
            self.bench2.bid = b.clone();
        }
        if let Some(v) = o.view {
            self.bench1.view = v;
            self.impute.view = Some(v);
        }
        if let Some(s) = o.scenario {
            self.bench1.scenarios = vec![s];
        }
    }
}

/// Small settings for tests and quick looks: a compact world, short chains.
pub fn quick_world() -> WorldConfig {
    WorldConfig {
        local_boreholes: 24,
        global_boreholes: 16,
        records_per_borehole: IntRange::new(8, 12),
        ..WorldConfig::default()
    }
}
