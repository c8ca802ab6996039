//! Run manifests: every command writes one, with enough detail to reproduce
//! its outputs byte-identically from the same inputs and seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub master_seed: u64,
    pub artifact_version: String,
    pub input_digests: BTreeMap<String, String>,
    pub wall_clock_unix_secs: u64,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            master_seed: seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            input_digests: BTreeMap::new(),
            wall_clock_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            duration_secs: 0.0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn digest_input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.input_digests
            .insert(path.display().to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        let path = out_dir.join("manifest.json");
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
