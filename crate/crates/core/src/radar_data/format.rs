//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json    {format_version, height, width, interval_minutes,
//!                         sequences: [{id, t_total, file}],
//!                         boundary?, teacher_checkpoint_hash?}
//! <dir>/seq-00000.u8     row-major [t_total, height, width] unsigned bytes
//! ```
//!
//! Writes go to a sibling temporary directory that replaces the target only
//! once every file is on disk.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DatasetSpec, RadarSequence};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub t_total: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub interval_minutes: u32,
    pub sequences: Vec<ManifestEntry>,
    /// First synthetic frame index of augmented datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<usize>,
    /// SHA-256 of the teacher checkpoint that produced the synthetic tail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint_hash: Option<String>,
}

/// A loaded directory: manifest plus validated sequences.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub manifest: Manifest,
    pub sequences: Vec<RadarSequence>,
}

pub fn load_dataset(path: &Path, spec: &DatasetSpec) -> Result<Vec<RadarSequence>> {
    Ok(load_dataset_dir(path, spec)?.sequences)
}

pub fn load_dataset_dir(path: &Path, spec: &DatasetSpec) -> Result<DatasetDir> {
    let manifest_path = path.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Format(format!("no {MANIFEST_FILE} in {}", path.display())));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if !manifest.sequences.is_empty() && (manifest.height != spec.height || manifest.width != spec.width) {
        return Err(Error::Validation {
            id: manifest.sequences[0].id.clone(),
            reason: format!(
                "manifest grid {}x{} does not match expected {}x{}",
                manifest.height, manifest.width, spec.height, spec.width
            ),
        });
    }

    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let file = path.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let expected = entry.t_total * manifest.height * manifest.width;
        if bytes.len() != expected {
            return Err(Error::Validation {
                id: entry.id.clone(),
                reason: format!(
                    "{} holds {} bytes, manifest implies {} ({} x {} x {})",
                    entry.file,
                    bytes.len(),
                    expected,
                    entry.t_total,
                    manifest.height,
                    manifest.width
                ),
            });
        }
        let frames = Array3::from_shape_vec((entry.t_total, manifest.height, manifest.width), bytes)
            .expect("length checked above");
        let seq = RadarSequence::new(entry.id.clone(), frames, manifest.interval_minutes);
        seq.validate(spec)?;
        sequences.push(seq);
    }
    Ok(DatasetDir { manifest, sequences })
}

pub fn write_dataset(sequences: &[RadarSequence], path: &Path) -> Result<()> {
    write_dataset_with(sequences, path, None, None)
}

/// Writes a dataset, optionally tagging it as teacher-augmented.
pub fn write_dataset_with(
    sequences: &[RadarSequence],
    path: &Path,
    boundary: Option<usize>,
    teacher_checkpoint_hash: Option<String>,
) -> Result<()> {
    let (height, width, interval) = match sequences.first() {
        Some(s) => (s.height(), s.width(), s.interval_minutes),
        None => (0, 0, 5),
    };
    if let Some(bad) = sequences.iter().find(|s| s.height() != height || s.width() != width) {
        return Err(Error::Validation {
            id: bad.id.clone(),
            reason: format!("grid {}x{} differs from {height}x{width}", bad.height(), bad.width()),
        });
    }

    let staging = staging_dir(path);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let mut entries = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let file = format!("seq-{i:05}.u8");
        let bytes: Vec<u8> = seq.frames.iter().copied().collect();
        let target = staging.join(&file);
        fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
        entries.push(ManifestEntry {
            id: seq.id.clone(),
            t_total: seq.len(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        height,
        width,
        interval_minutes: interval,
        sequences: entries,
        boundary,
        teacher_checkpoint_hash,
    };
    let manifest_path = staging.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    replace_dir(&staging, path)
}

fn staging_dir(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Swaps `staging` into place of `target`, removing the previous contents.
pub(crate) fn replace_dir(staging: &Path, target: &Path) -> Result<()> {
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    if target.exists() {
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let old = target.with_file_name(format!(".{name}.old-{}", std::process::id()));
        fs::rename(target, &old).map_err(|e| Error::io(target, e))?;
        fs::rename(staging, target).map_err(|e| Error::io(target, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(staging, target).map_err(|e| Error::io(target, e))?;
    }
    Ok(())
}
