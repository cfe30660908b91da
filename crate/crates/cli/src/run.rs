use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const VERSION: &str = concat!("pcg ", env!("CARGO_PKG_VERSION"));
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Marks an error as a usage error (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Everything needed to reconstruct a run from its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    /// Content hashes of inputs, keyed by a path-independent name.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct RunDir {
    pub path: PathBuf,
    record: RunRecord,
}

impl RunDir {
    pub fn new(path: PathBuf, command: &str, config: &RunConfig) -> Self {
        Self {
            path,
            record: RunRecord {
                version: VERSION.to_string(),
                command: command.to_string(),
                config_hash: config.hash(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn input(&mut self, name: &str, hash: String) {
        self.record.inputs.insert(name.to_string(), hash);
    }

    /// Writes `bytes` to `name` inside the directory and records its hash.
    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.file(name), bytes)?;
        self.record.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn output_hash(&mut self, name: &str, hash: String) {
        self.record.outputs.insert(name.to_string(), hash);
    }

    pub fn record_existing(&mut self, name: &str) -> Result<()> {
        let hash = file_hash(&self.file(name))?;
        self.record.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn finish(self, config: &RunConfig) -> Result<RunRecord> {
        write_atomic(&self.file(CONFIG_FILE), config.to_toml()?.as_bytes())?;
        let json = serde_json::to_string_pretty(&self.record)? + "\n";
        write_atomic(&self.file(RUN_FILE), json.as_bytes())?;
        Ok(self.record)
    }
}
