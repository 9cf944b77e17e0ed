//! Volume loading and storage.

mod fixture;
mod nifti;

pub use fixture::{fixture_paths, read_fixture, write_fixture};
pub use nifti::{decode_nifti, encode_nifti, parse_header, read_nifti, write_nifti, NiftiDtype, NiftiHeader};

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::volume::MaskVolume;

/// Finds `<dir>/<stem>.nii.gz` or `<dir>/<stem>.nii`, preferring the
/// compressed file.
pub fn find_nifti(dir: impl AsRef<Path>, stem: &str) -> Option<PathBuf> {
    let dir = dir.as_ref();
    [format!("{stem}.nii.gz"), format!("{stem}.nii")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

/// Reads a NIfTI mask; voxels ≥ 0.5 become foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    Ok(read_nifti(path)?.to_mask(0.5))
}

pub fn write_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(&mask.to_volume(), path)
}
