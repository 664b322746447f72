//! Run manifest written next to every command's outputs so a run can be
//! reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Input label → path as given on the command line.
    pub inputs: BTreeMap<String, String>,
    /// Effective configuration after defaults were applied.
    pub config: Value,
    pub out_dir: String,
    pub seed: Option<u64>,
    pub version: String,
    /// RFC 3339 UTC; the only field allowed to differ between identical runs.
    pub timestamp: String,
    /// Free-form counters and diagnostics (e.g. zeroed detection count).
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            inputs: BTreeMap::new(),
            config: Value::Null,
            out_dir: out_dir.display().to_string(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) {
        self.inputs.insert(label.to_string(), path.display().to_string());
    }

    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        ikfit::formats::save_json(&out_dir.join("manifest.json"), self)?;
        Ok(())
    }
}
