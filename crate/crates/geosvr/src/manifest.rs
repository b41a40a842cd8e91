//! Run manifests: a JSON record written next to every command's outputs.
//!
//! The manifest captures enough to re-run the command: the exact command
//! line, the fully resolved config snapshot, the seed, and the paths of all
//! artifacts produced. Field order is fixed by the struct and artifacts live
//! in a sorted map, so serialization is deterministic; in deterministic mode
//! the wall-clock timestamps are written as zero so two identical runs
//! produce byte-identical manifests.

use crate::error::{EngineError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    /// The command line that produced this run, space-joined.
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Resolved `key = value` config snapshot, one line per key.
    pub config: String,
    /// Artifact name to path, sorted by name.
    pub artifacts: BTreeMap<String, String>,
    /// Unix milliseconds; zero in deterministic mode.
    pub started_unix_ms: u64,
    /// Unix milliseconds; zero in deterministic mode or while running.
    pub finished_unix_ms: u64,
    pub code_version: String,
    pub checkpoint_format: u32,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, deterministic: bool, config: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            deterministic,
            config: config.to_string(),
            artifacts: BTreeMap::new(),
            started_unix_ms: if deterministic { 0 } else { now_ms() },
            finished_unix_ms: 0,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: crate::grid::CHECKPOINT_VERSION,
        }
    }

    pub fn add_artifact(&mut self, name: &str, path: &Path) {
        self.artifacts
            .insert(name.to_string(), path.display().to_string());
    }

    /// Stamps the completion time (left at zero in deterministic mode).
    pub fn finish(&mut self) {
        if !self.deterministic {
            self.finished_unix_ms = now_ms();
        }
    }

    pub fn to_json(&self) -> String {
        // struct serialization cannot fail; artifacts are plain strings
        serde_json::to_string_pretty(self).expect("manifest serialization")
    }

    pub fn parse(text: &str) -> std::result::Result<RunManifest, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = self.to_json();
        body.push('\n');
        std::fs::write(path, body)
            .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))
    }
}
