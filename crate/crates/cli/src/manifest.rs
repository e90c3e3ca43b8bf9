//! Run manifests: everything needed to replay a command.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Fully resolved config, every default written out.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    /// File name to SHA-256 hex digest.
    #[serde(default)]
    pub dataset_checksums: BTreeMap<String, String>,
    /// Seeds of every run, for multi-seed commands.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn code_version() -> String {
    format!("otfuse {}", env!("CARGO_PKG_VERSION"))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            code_version: code_version(),
            seed,
            config: serde_json::to_value(config)?,
            data_path: None,
            dataset_checksums: BTreeMap::new(),
            seeds: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }

    /// Parses `value` as a manifest if it declares `manifest_version`.
    pub fn from_value(value: &serde_json::Value) -> Option<Result<Self>> {
        value
            .get("manifest_version")
            .map(|_| serde_json::from_value(value.clone()).context("malformed run manifest"))
    }
}
