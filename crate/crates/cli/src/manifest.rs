use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use headpool::models::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::exit::{CliError, Context, USAGE};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUNS_ROOT_ENV: &str = "HEADPOOL_RUNS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub iterations: usize,
    pub checkpoint: String,
    pub student_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    #[serde(default)]
    pub stage_history: Vec<StageRecord>,
    /// Artifact name to path relative to the run directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    /// Unix seconds; absent in determinism mode.
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
}

impl RunManifest {
    pub fn new(run_id: &str, command: &str, config_hash: &str, seed: u64, deterministic: bool) -> Self {
        Self {
            run_id: run_id.into(),
            command: command.into(),
            config_hash: config_hash.into(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            stage_history: Vec::new(),
            artifacts: BTreeMap::new(),
            started_at: timestamp(deterministic),
            finished_at: None,
        }
    }

    pub fn load(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join(RUN_MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&dir.join(RUN_MANIFEST), text.as_bytes()).ctx(USAGE, "writing run manifest")
    }

    pub fn finish(&mut self, deterministic: bool) {
        self.finished_at = timestamp(deterministic);
    }
}

pub fn timestamp(deterministic: bool) -> Option<u64> {
    (!deterministic).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// `<root>/<command>-<first 12 hash chars>-s<seed>`.
pub fn run_dir(root: &Path, command: &str, hash: &str, seed: u64) -> (String, PathBuf) {
    let id = format!("{command}-{}-s{seed}", &hash[..12]);
    let dir = root.join(&id);
    (id, dir)
}
