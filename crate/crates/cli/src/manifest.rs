//! Run manifests: the resolved config, every seed, input digests and the
//! task list. Nothing time-dependent goes in, so reruns write equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use geopfn::context::TaskMeta;
use geopfn::eval::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    /// Every seed the run consumed, by role.
    pub seeds: BTreeMap<String, u64>,
    pub checkpoint: Option<FileDigest>,
    pub inputs: Vec<FileDigest>,
    pub tasks: Vec<TaskMeta>,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            checkpoint: None,
            inputs: Vec::new(),
            tasks: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, role: &str, value: u64) {
        self.seeds.insert(role.into(), value);
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}
