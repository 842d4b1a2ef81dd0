use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: Option<String>,
    pub config: Option<serde_json::Value>,
    pub corpus_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub args: Vec<String>,
}

/// SHA-256 of the value's JSON with object keys sorted.
pub fn config_hash(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("JSON values always serialize");
    crate::embeddings::hex(&Sha256::digest(canonical.as_bytes()))
}

impl Manifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: None,
            config: None,
            corpus_paths: Vec::new(),
            seed: None,
            outputs: Vec::new(),
            args: args.to_vec(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        self.config_sha256 = Some(config_hash(&value));
        self.config = Some(value);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
