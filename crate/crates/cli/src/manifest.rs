//! Run manifests: one JSON file per artifact-producing command.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub tool: &'static str,
    pub checkpoint_format: u32,
    pub report_schema: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            tool: env!("CARGO_PKG_VERSION"),
            checkpoint_format: bitspike::ann::checkpoint::VERSION,
            report_schema: bitspike::analyze::REPORT_SCHEMA_VERSION,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Parsed configuration or flag values the run used.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub banner: Option<String>,
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: serde_json::Value, seed: Option<u64>) -> Self {
        let now = Utc::now();
        Self {
            command: command.into(),
            args: args.to_vec(),
            config,
            seed,
            versions: Versions::default(),
            started: now,
            finished: now,
            outputs: Vec::new(),
            banner: None,
            summary: serde_json::Value::Null,
        }
    }

    /// `<artifact>.manifest.json`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write(mut self, artifact: &Path) -> anyhow::Result<PathBuf> {
        self.finished = Utc::now();
        let path = Self::path_for(artifact);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
