//! Directory-per-case discovery with fixed modality file names.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use ttafuse_core::io::{find_nifti, read_mask, read_nifti};
use ttafuse_core::preprocess::BBox;
use ttafuse_core::{MaskVolume, Volume3D};

use crate::DataError;

pub const BBOX_FILE: &str = "bbox.json";

/// Crop box written by `preprocess` and consumed by `tta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub full_dims: [usize; 3],
}

impl CropRecord {
    pub fn bbox(&self) -> BBox {
        BBox { lo: self.lo, hi: self.hi }
    }
}

/// Subdirectories of `dir`, sorted by name.
pub fn case_dirs(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| DataError(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn case_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "case".to_string())
}

pub fn load_modality(dir: &Path, stem: &str) -> anyhow::Result<Volume3D> {
    let path = find_nifti(dir, stem)
        .ok_or_else(|| DataError(format!("{}: missing {stem}.nii or {stem}.nii.gz", dir.display())))?;
    read_nifti(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_seg(dir: &Path) -> anyhow::Result<Option<MaskVolume>> {
    match find_nifti(dir, "seg") {
        Some(p) => Ok(Some(read_mask(&p).with_context(|| format!("reading {}", p.display()))?)),
        None => Ok(None),
    }
}

pub fn load_crop(dir: &Path) -> anyhow::Result<Option<CropRecord>> {
    let path = dir.join(BBOX_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let rec = serde_json::from_str(&text).map_err(|e| DataError(format!("{}: {e}", path.display())))?;
    Ok(Some(rec))
}

/// Strips `.nii.gz` / `.nii` from a file name.
pub fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

/// Masks in an evaluation directory: `<id>.nii[.gz]` files, or `<id>/`
/// folders holding `seg`, `mask` or `pred` NIfTI files. A `<id>_prob` soft
/// map written by `tta` next to `<id>` is skipped.
pub fn mask_entries(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| DataError(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() {
            if let Some(p) = ["seg", "mask", "pred"].iter().find_map(|s| find_nifti(entry.path(), s)) {
                out.entry(name).or_insert(p);
            }
        } else if let Some(stem) = nifti_stem(&name) {
            // a plain file wins over a same-named folder
            out.insert(stem.to_string(), entry.path());
        }
    }
    let soft: Vec<String> = out
        .keys()
        .filter(|k| k.strip_suffix("_prob").is_some_and(|base| out.contains_key(base)))
        .cloned()
        .collect();
    for k in soft {
        out.remove(&k);
    }
    Ok(out)
}
