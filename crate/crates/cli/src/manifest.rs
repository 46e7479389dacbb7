use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use movgan::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the exact configuration text the command ran with.
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    /// Files written by the command, relative to the manifest directory.
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(command: &str, config_text: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }

    /// Stamps the end time and writes `<dir>/manifest.json`, replacing any
    /// manifest from an earlier run.
    pub fn finish(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
        self.finished = now();
        self.outputs = outputs
            .iter()
            .map(|p| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.clone()))
            .collect();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
