//! Intensity windowing and CT-driven foreground cropping.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::volume::{Geometry, MaskVolume, Volume3D};

/// Linear intensity map from `[in_min, in_max]` to `[out_min, out_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleWindow {
    pub in_min: f64,
    pub in_max: f64,
    pub out_min: f64,
    pub out_max: f64,
    #[serde(default = "default_clamp")]
    pub clamp: bool,
}

fn default_clamp() -> bool {
    true
}

impl ScaleWindow {
    pub fn new(in_min: f64, in_max: f64, out_min: f64, out_max: f64, clamp: bool) -> Result<Self> {
        let w = ScaleWindow { in_min, in_max, out_min, out_max, clamp };
        w.validate()?;
        Ok(w)
    }

    /// CT default: `[100, 250]` → `[0, 1]`, clamped.
    pub fn ct_default() -> Self {
        ScaleWindow { in_min: 100.0, in_max: 250.0, out_min: 0.0, out_max: 1.0, clamp: true }
    }

    /// PET default: `[0, 15]` SUV → `[0, 1]`, clamped.
    pub fn pet_default() -> Self {
        ScaleWindow { in_min: 0.0, in_max: 15.0, out_min: 0.0, out_max: 1.0, clamp: true }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.in_min, self.in_max, self.out_min, self.out_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return param("scale window bounds must be finite");
        }
        if !(self.in_min < self.in_max) {
            return param(format!(
                "degenerate input window [{}, {}]",
                self.in_min, self.in_max
            ));
        }
        if !(self.out_min < self.out_max) {
            return param(format!(
                "degenerate output window [{}, {}]",
                self.out_min, self.out_max
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        let mut v = v as f64;
        if self.clamp {
            v = v.clamp(self.in_min, self.in_max);
        }
        let t = (v - self.in_min) / (self.in_max - self.in_min);
        let out = self.out_min + t * (self.out_max - self.out_min);
        if self.clamp {
            out.clamp(self.out_min, self.out_max) as f32
        } else {
            out as f32
        }
    }
}

pub fn scale_intensity(vol: &Volume3D, w: &ScaleWindow) -> Result<Volume3D> {
    w.validate()?;
    vol.map(|v| w.apply(v))
}

/// Axis-aligned voxel box, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn full(dims: [usize; 3]) -> Self {
        BBox { lo: [0; 3], hi: dims }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] >= self.hi[a] || self.hi[a] > dims[a] {
                return param(format!(
                    "box lo {:?} hi {:?} is empty or outside dims {:?}",
                    self.lo, self.hi, dims
                ));
            }
        }
        Ok(())
    }
}

/// Tightest box holding every voxel `> threshold`, dilated by `margin` and
/// clipped to the volume. Falls back to the full volume when nothing exceeds
/// the threshold.
pub fn foreground_bbox(ct: &Volume3D, threshold: f32, margin: usize) -> BBox {
    let dims = ct.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in ct.data().iter().enumerate() {
        if v > threshold {
            any = true;
            let p = ct.geometry().coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
        }
    }
    if !any {
        return BBox::full(dims);
    }
    BBox {
        lo: [0, 1, 2].map(|a| lo[a].saturating_sub(margin)),
        hi: [0, 1, 2].map(|a| (hi[a] + margin).min(dims[a])),
    }
}

fn cropped_geometry(g: &Geometry, b: &BBox) -> Geometry {
    Geometry {
        dims: b.extent(),
        spacing: g.spacing,
        origin: [0, 1, 2].map(|a| g.origin[a] + b.lo[a] as f64 * g.spacing[a]),
    }
}

fn crop_slice<T: Copy>(g: &Geometry, data: &[T], b: &BBox) -> Vec<T> {
    let [ex, ey, ez] = b.extent();
    let mut out = Vec::with_capacity(ex * ey * ez);
    for z in b.lo[2]..b.hi[2] {
        for y in b.lo[1]..b.hi[1] {
            let start = g.index(b.lo[0], y, z);
            out.extend_from_slice(&data[start..start + ex]);
        }
    }
    out
}

pub fn crop(vol: &Volume3D, b: &BBox) -> Result<Volume3D> {
    b.validate(vol.dims())?;
    let g = cropped_geometry(vol.geometry(), b);
    Ok(Volume3D::from_parts_unchecked(g, crop_slice(vol.geometry(), vol.data(), b)))
}

pub fn crop_mask(mask: &MaskVolume, b: &BBox) -> Result<MaskVolume> {
    b.validate(mask.dims())?;
    let g = cropped_geometry(mask.geometry(), b);
    MaskVolume::new(g, crop_slice(mask.geometry(), mask.data(), b))
}

fn uncropped_geometry(g: &Geometry, b: &BBox, full_dims: [usize; 3]) -> Result<Geometry> {
    b.validate(full_dims)?;
    if g.dims != b.extent() {
        return param(format!(
            "dims {:?} do not match box extent {:?}",
            g.dims,
            b.extent()
        ));
    }
    Ok(Geometry {
        dims: full_dims,
        spacing: g.spacing,
        origin: [0, 1, 2].map(|a| g.origin[a] - b.lo[a] as f64 * g.spacing[a]),
    })
}

fn place_slice<T: Copy + Default>(src: &[T], b: &BBox, full: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); full.len()];
    let ex = b.extent()[0];
    let mut rows = src.chunks_exact(ex);
    for z in b.lo[2]..b.hi[2] {
        for y in b.lo[1]..b.hi[1] {
            let start = full.index(b.lo[0], y, z);
            out[start..start + ex].copy_from_slice(rows.next().expect("row count matches box"));
        }
    }
    out
}

/// Zero-pads a cropped mask back into a `full_dims` grid at `box.lo`.
pub fn uncrop_mask(mask: &MaskVolume, b: &BBox, full_dims: [usize; 3]) -> Result<MaskVolume> {
    let g = uncropped_geometry(mask.geometry(), b, full_dims)?;
    MaskVolume::new(g, place_slice(mask.data(), b, &g))
}

/// Zero-pads a cropped volume back into a `full_dims` grid at `box.lo`.
pub fn uncrop_volume(vol: &Volume3D, b: &BBox, full_dims: [usize; 3]) -> Result<Volume3D> {
    let g = uncropped_geometry(vol.geometry(), b, full_dims)?;
    Ok(Volume3D::from_parts_unchecked(g, place_slice(vol.data(), b, &g)))
}

/// Windowing and cropping settings applied to every case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub ct_window: ScaleWindow,
    pub pet_window: ScaleWindow,
    /// Threshold on the scaled CT. `None` means just above the CT floor.
    pub crop_threshold: Option<f64>,
    pub crop_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            ct_window: ScaleWindow::ct_default(),
            pet_window: ScaleWindow::pet_default(),
            crop_threshold: None,
            crop_margin: 0,
        }
    }
}

/// A scaled, cropped CT/PET pair and the box it was cut from.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub ct: Volume3D,
    pub pet: Volume3D,
    pub bbox: BBox,
    pub full_dims: [usize; 3],
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.ct_window.validate()?;
        self.pet_window.validate()?;
        if let Some(t) = self.crop_threshold {
            if !t.is_finite() {
                return param("crop_threshold must be finite");
            }
        }
        Ok(())
    }

    pub fn effective_crop_threshold(&self) -> f64 {
        self.crop_threshold.unwrap_or(self.ct_window.out_min.min(self.ct_window.out_max) + 1e-3)
    }

    /// Scales both modalities, then crops both to the CT foreground box.
    pub fn apply(&self, ct: &Volume3D, pet: &Volume3D) -> Result<PreparedCase> {
        self.validate()?;
        if !crate::volume::geometry_match(ct, pet) {
            return param("CT and PET geometry differ");
        }
        let ct_s = scale_intensity(ct, &self.ct_window)?;
        let pet_s = scale_intensity(pet, &self.pet_window)?;
        let bbox = foreground_bbox(&ct_s, self.effective_crop_threshold() as f32, self.crop_margin);
        Ok(PreparedCase { ct: crop(&ct_s, &bbox)?, pet: crop(&pet_s, &bbox)?, bbox, full_dims: ct.dims() })
    }
}
