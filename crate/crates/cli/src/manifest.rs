//! Run manifests and the run directories they name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pmtkg::rng::content_hash;
use pmtkg::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub role: String,
    /// File path as given, or `builtin:<name>`.
    pub source: String,
    pub sha256: String,
}

impl InputRef {
    pub fn new(role: &str, source: impl Into<String>, bytes: &[u8]) -> Self {
        InputRef { role: role.into(), source: source.into(), sha256: content_hash(bytes) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputRef>,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    /// File names inside the run directory; empty until the run finishes.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, inputs: Vec<InputRef>, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.into(),
            config,
            inputs,
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            outputs: Vec::new(),
        }
    }

    /// Hash of everything except the outputs.
    pub fn id(&self) -> String {
        let mut m = self.clone();
        m.outputs.clear();
        content_hash(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }

    pub fn run_dir(&self, base: &Path) -> PathBuf {
        base.join(format!("{}-{}", self.command.replace(' ', "-"), &self.id()[..16]))
    }

    /// Record `written` (paths inside `dir`) and write the manifest.
    pub fn finish(&mut self, dir: &Path, written: &[PathBuf]) -> Result<PathBuf> {
        let mut names: Vec<String> = written
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        names.sort();
        names.dedup();
        self.outputs = names;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
