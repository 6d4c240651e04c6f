//! Run manifests: every command writes one alongside its outputs, with
//! the full argv, seed, input fingerprints, and completion status, so any
//! run can be reproduced or identified as failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// input path -> sha256 of file bytes
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started: String,
    pub finished: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: chrono::DateTime<chrono::Utc>,
    path: PathBuf,
}

impl ManifestBuilder {
    /// `path` is where the manifest itself will be written.
    pub fn new(command: &str, path: PathBuf) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().skip(1).collect(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: chrono::Utc::now(),
            path,
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)
            .with_context(|| format!("cannot fingerprint input {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.inputs
            .insert(path.display().to_string(), hex_string(&digest));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest with completed/failed status; called exactly
    /// once, after the command body ran.
    pub fn finish(self, error: Option<&anyhow::Error>) -> Result<()> {
        let manifest = RunManifest {
            artifact: "copydetect",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: self.argv,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started: self.started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
            status: if error.is_none() {
                "completed"
            } else {
                "failed"
            },
            error: error.map(|e| format!("{e:#}")),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        if let Some(parent) = self.path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(&self.path, text)
            .with_context(|| format!("cannot write manifest {}", self.path.display()))?;
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(bytes.len() * 2);
    for byte in bytes {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Manifest path for a command with a single primary output.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
