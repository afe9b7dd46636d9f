//! Per-stage manifest: what was read, what was written, under which config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Workdir-relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timestamps: Timestamps,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Collects input and output hashes while a stage runs.
pub struct Recorder {
    stage: String,
    root: PathBuf,
    started: u128,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Recorder {
    pub fn new(stage: &str, root: &Path) -> Self {
        Self { stage: stage.into(), root: root.to_path_buf(), started: now_ms(), inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    /// Fails with a missing-prerequisite error unless `path` exists; records its hash.
    pub fn input(&mut self, path: &Path) -> Result<PathBuf, CliError> {
        if !path.is_file() {
            return Err(CliError::missing(path));
        }
        let h = sha256_file(path)?;
        self.inputs.insert(self.key(path), h);
        Ok(path.to_path_buf())
    }

    /// Records a file the stage has just written.
    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let h = sha256_file(path)?;
        self.outputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn write_bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        curvedit::io::write_atomic(path, bytes)?;
        self.output(path)
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<(), CliError> {
        curvedit::io::write_json_atomic(path, value)?;
        self.output(path)
    }

    pub fn finish(self, manifest_path: &Path, config_hash: &str) -> Result<Manifest, CliError> {
        let m = Manifest {
            stage: self.stage,
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            inputs: self.inputs,
            outputs: self.outputs,
            timestamps: Timestamps { started_unix_ms: self.started, finished_unix_ms: now_ms() },
        };
        curvedit::io::write_json_atomic(manifest_path, &m)?;
        Ok(m)
    }
}
