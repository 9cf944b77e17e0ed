//! Raw test-fixture format: `<name>.json` sidecar holding the geometry and
//! `<name>.raw` holding little-endian `f32` voxels, x-fastest.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

/// Sidecar and raw paths for a fixture; `path` may name either file or
/// the shared stem.
pub fn fixture_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("raw"))
}

pub fn read_fixture(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (json, raw) = fixture_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(json.clone()),
        _ => Error::Io(e),
    })?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", json.display())))?;
    let geometry = Geometry::new(sidecar.dims, sidecar.spacing, sidecar.origin)
        .map_err(|e| Error::Parse(format!("{}: {e}", json.display())))?;
    let bytes = fs::read(&raw).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(raw.clone()),
        _ => Error::Io(e),
    })?;
    let expected = 4 * geometry.len();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, dims {:?} require {expected}",
            raw.display(),
            bytes.len(),
            geometry.dims
        )));
    }
    let mut data = vec![0f32; geometry.len()];
    LittleEndian::read_f32_into(&bytes, &mut data);
    Volume3D::new(geometry, data)
}

pub fn write_fixture(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let (json, raw) = fixture_paths(path);
    let g = vol.geometry();
    let sidecar = Sidecar { dims: g.dims, spacing: g.spacing, origin: g.origin };
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    let mut bytes = vec![0u8; 4 * vol.len()];
    LittleEndian::write_f32_into(vol.data(), &mut bytes);
    fs::write(&raw, bytes)?;
    Ok(())
}
