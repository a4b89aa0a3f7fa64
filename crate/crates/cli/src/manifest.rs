//! Run manifests: enough to re-run a command and check its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
    /// False for outputs holding timings.
    #[serde(default = "yes")]
    pub deterministic: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u128,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Fully resolved arguments (config file merged in, `--config` and
    /// `--out` removed).
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_clock: WallClock,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_record(path: &Path, deterministic: bool) -> Result<FileRecord> {
    let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(FileRecord {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
        deterministic,
    })
}

/// Collects a run's inputs and outputs as it goes.
pub struct Recorder {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub out_dir: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    started: SystemTime,
    clock: Instant,
}

impl Recorder {
    pub fn new(command: &str, argv: Vec<String>, config: serde_json::Value, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Failure::data(format!("{}: {e}", out_dir.display())))?;
        Ok(Self {
            command: command.to_string(),
            argv,
            config,
            seeds: serde_json::Value::Null,
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        })
    }

    /// Reads an input file, recording its hash. Missing files name the path.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
        if !self.inputs.iter().any(|r| r.path == path) {
            self.inputs.push(FileRecord {
                path: path.to_path_buf(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
                deterministic: true,
            });
        }
        Ok(bytes)
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write_output(&mut self, name: &str, bytes: &[u8], deterministic: bool) -> Result<PathBuf> {
        let path = self.output_path(name);
        fs::write(&path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(FileRecord {
            path: path.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            deterministic,
        });
        Ok(path)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let m = RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            argv: self.argv,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock: WallClock {
                started_unix_ms: self.started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
                elapsed_s: self.clock.elapsed().as_secs_f64(),
            },
        };
        let path = self.out_dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&m).context("serializing manifest")?;
        fs::write(&path, text + "\n").map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("{}: malformed manifest: {e}", path.display())).into())
}
