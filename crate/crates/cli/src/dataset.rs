//! Directories of GPV volumes with optional `truth.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gpp_core::evalrank::{read_truth_csv, TruthRecord};
use gpp_core::volgrid::{gpv_paths, load_annotated, Volume};

use crate::manifest::Manifest;
use crate::Failure;

pub const TRUTH_FILE: &str = "truth.csv";

pub struct Entry {
    pub volume: Volume,
    pub gppi: Option<usize>,
    pub study: String,
}

/// Stems of every `<stem>.json` with a matching `<stem>.raw`, sorted.
pub fn volume_stems(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let read = std::fs::read_dir(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    let mut stems = Vec::new();
    for entry in read {
        let path = entry
            .map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let stem = path.with_extension("");
        if gpv_paths(&stem).1.is_file() {
            stems.push(stem);
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Failure::input(format!("no volumes in {}", dir.display())));
    }
    Ok(stems)
}

pub fn read_truth(path: &Path, manifest: &mut Manifest) -> Result<Vec<TruthRecord>, Failure> {
    let rows = read_truth_csv(path)?;
    manifest.input(path)?;
    Ok(rows)
}

/// Loads every volume in `dir`. Planes come from `truth.csv` when present,
/// else from the sidecars.
pub fn load_dir(dir: &Path, manifest: &mut Manifest) -> Result<Vec<Entry>, Failure> {
    let truth_path = dir.join(TRUTH_FILE);
    let truth: BTreeMap<String, TruthRecord> = if truth_path.is_file() {
        read_truth(&truth_path, manifest)?
            .into_iter()
            .map(|t| (t.volume_id.clone(), t))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut out = Vec::new();
    for stem in volume_stems(dir)? {
        let (volume, ann) = load_annotated(&stem)?;
        let (json, raw) = gpv_paths(&stem);
        manifest.input(&json)?;
        manifest.input(&raw)?;
        let (gppi, study) = match truth.get(volume.id()) {
            Some(t) => {
                let g = usize::try_from(t.gppi)
                    .map_err(|_| Failure::input(format!("negative plane for '{}'", t.volume_id)))?;
                (Some(g), t.study.clone())
            }
            None => (ann.map(|a| a.gppi), String::from("all")),
        };
        out.push(Entry { volume, gppi, study });
    }
    Ok(out)
}
