//! Per-run JSON manifest: inputs and outputs with their SHA-256, seeds,
//! resolved parameters and the tool version. No timestamps, so reruns
//! produce the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileHash {
    pub fn of_bytes(path: &Path, bytes: &[u8]) -> Self {
        FileHash {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        }
    }

    pub fn of_file(path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        Ok(FileHash::of_bytes(path, &bytes))
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seeds: BTreeMap<String, u64>,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn new(command: &'static str, parameters: serde_json::Value) -> Self {
        Manifest {
            tool: "gpp",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seeds: BTreeMap::new(),
            parameters,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.push(FileHash::of_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        self.outputs.push(FileHash::of_file(path)?);
        Ok(())
    }

    /// Writes the manifest with inputs and outputs sorted by path.
    pub fn write(mut self, path: &Path) -> Result<PathBuf, Failure> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut text =
            serde_json::to_string_pretty(&self).map_err(|e| Failure::Internal(format!("manifest: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        Ok(path.to_path_buf())
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}
