//! The `run.json` written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const RUN_RECORD_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub command_line: Vec<String>,
    pub version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub store_hash: Option<String>,
    pub outputs: Vec<String>,
    /// Command-specific results (measured label quality, final loss, ...).
    pub summary: Value,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

/// Collects what a command did while it runs.
pub struct Recorder {
    record: RunRecord,
    started: Instant,
    out_dir: PathBuf,
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        let started_unix_secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            record: RunRecord {
                command: command.to_string(),
                command_line: std::env::args().collect(),
                version: artifact_version(),
                config: Value::Null,
                seeds: BTreeMap::new(),
                store_hash: None,
                outputs: Vec::new(),
                summary: Value::Null,
                started_unix_secs,
                wall_clock_secs: 0.0,
            },
            started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn config(&mut self, config: &impl Serialize) -> Result<()> {
        self.record.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, purpose: &str, seed: u64) {
        self.record.seeds.insert(purpose.to_string(), seed);
    }

    pub fn store_hash(&mut self, hash: String) {
        self.record.store_hash = Some(hash);
    }

    pub fn summary(&mut self, summary: Value) {
        self.record.summary = summary;
    }

    /// Writes `bytes` under the output directory and lists the file as an output.
    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.output(name);
        Ok(path)
    }

    pub fn output(&mut self, name: &str) {
        self.record.outputs.push(name.to_string());
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.record.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join(RUN_RECORD_FILE);
        let mut json = serde_json::to_vec_pretty(&self.record)?;
        json.push(b'\n');
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn artifact_version() -> String {
    match option_env!("PROBESEG_GIT_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}
