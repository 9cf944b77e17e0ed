//! Dense 3D scalar volumes and binary masks with physical geometry.
//!
//! Voxels are stored x-fastest (`x + nx * (y + ny * z)`), the same order
//! NIfTI uses on disk.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Componentwise tolerance (mm) used when comparing spacing and origin.
pub const GEOMETRY_TOLERANCE_MM: f64 = 1e-4;

/// Grid size plus physical placement of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Voxel size in millimeters.
    pub spacing: [f64; 3],
    /// Position of voxel (0, 0, 0) in millimeters.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return param(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return param(format!(
                "spacing must be finite and strictly positive, got {:?}",
                self.spacing
            ));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return param(format!("origin must be finite, got {:?}", self.origin));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Volume of a single voxel in milliliters.
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    /// Exact dims, spacing/origin within [`GEOMETRY_TOLERANCE_MM`].
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .chain(self.origin.iter().zip(&other.origin))
                .all(|(a, b)| (a - b).abs() <= GEOMETRY_TOLERANCE_MM)
    }
}

/// A 3D grid of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return param(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geometry.dims,
                geometry.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value {} at voxel {:?}",
                data[i],
                geometry.coords(i)
            )));
        }
        Ok(Volume3D { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        Volume3D { data: vec![value; geometry.len()], geometry }
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(geometry, data)
    }

    /// Skips the finiteness scan; callers guarantee every value is finite.
    pub(crate) fn from_parts_unchecked(geometry: Geometry, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Volume3D { geometry, data }
    }

    /// Bypasses every invariant so tests can build invalid maps.
    #[cfg(test)]
    pub(crate) fn from_parts_unchecked_for_test(geometry: Geometry, data: Vec<f32>) -> Self {
        Volume3D { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Minimum and maximum voxel value.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Same geometry, values produced by `f`; non-finite outputs are rejected.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.geometry, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Same geometry with different values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.geometry, data)
    }

    pub fn to_mask(&self, threshold: f32) -> MaskVolume {
        MaskVolume {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }
}

/// A binary volume; every voxel is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    geometry: Geometry,
    data: Vec<u8>,
}

impl Eq for Geometry {}

impl MaskVolume {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return param(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return param("mask voxels must be 0 or 1");
        }
        Ok(MaskVolume { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        MaskVolume { data: vec![0; geometry.len()], geometry }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_all_background(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::from_parts_unchecked(self.geometry, self.data.iter().map(|&v| f32::from(v)).collect())
    }
}

/// True iff dims are equal and spacing/origin agree within 1e-4 mm.
pub fn geometry_match(a: &Volume3D, b: &Volume3D) -> bool {
    a.geometry().matches(b.geometry())
}
