//! JSON config files. Unknown keys are errors, so a typo never silently
//! falls back to a default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use otfuse::synthdoc::GeneratorConfig;
use otfuse::trainer::TrainConfig;

use crate::manifest::RunManifest;

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("config {} is not valid JSON", path.display()))
}

pub fn load_generator_config(path: &Path) -> Result<GeneratorConfig> {
    let value = read_json(path)?;
    let value = match RunManifest::from_value(&value) {
        Some(m) => m?.config,
        None => value,
    };
    serde_json::from_value(value).with_context(|| format!("invalid generator config {}", path.display()))
}

/// A training config, possibly recovered from a run manifest along with the
/// dataset it was run on.
pub struct TrainSource {
    pub config: TrainConfig,
    pub data_path: Option<String>,
    pub checksum: Option<String>,
}

pub fn load_train_config(path: &Path) -> Result<TrainSource> {
    let value = read_json(path)?;
    match RunManifest::from_value(&value) {
        Some(m) => {
            let m = m?;
            if m.command != "train" && m.command != "ablate" {
                bail!("manifest {} records a `{}` run, not training", path.display(), m.command);
            }
            let config = serde_json::from_value(m.config)
                .with_context(|| format!("invalid training config in manifest {}", path.display()))?;
            let checksum = m.dataset_checksums.into_values().next();
            Ok(TrainSource {
                config,
                data_path: m.data_path,
                checksum,
            })
        }
        None => Ok(TrainSource {
            config: serde_json::from_value(value)
                .with_context(|| format!("invalid training config {}", path.display()))?,
            data_path: None,
            checksum: None,
        }),
    }
}
