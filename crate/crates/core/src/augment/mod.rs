//! Invertible test-time augmentations.
//!
//! A [`TransformSpec`] is applied to the CT/PET input pair before
//! prediction, and its spatial part is undone on the resulting probability
//! map with [`invert_on_prediction`] so every map lands in the reference
//! frame before fusion.

mod resample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::volume::{geometry_match, Geometry, Volume3D};

pub use resample::zoom;

/// Plane of a 90° rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Yz,
    Xz,
}

impl Plane {
    fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Yz => (1, 2),
            Plane::Xz => (0, 2),
        }
    }
}

/// Which input channel an intensity augmentation touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Ct,
    Pet,
    Both,
}

impl Channel {
    fn hits_ct(self) -> bool {
        matches!(self, Channel::Ct | Channel::Both)
    }

    fn hits_pet(self) -> bool {
        matches!(self, Channel::Pet | Channel::Both)
    }
}

/// One deterministic augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawSpec")]
pub enum TransformSpec {
    Identity,
    /// Mirror along a 1-based spatial axis (1 = x, 2 = y, 3 = z).
    Flip { axis: u8 },
    /// `k` quarter turns in `plane`.
    Rotate90 { plane: Plane, k: u8 },
    /// Adds `offset_fraction * (max - min)` of the targeted channel.
    #[serde(rename = "shift")]
    ShiftIntensity { offset_fraction: f64, target: Channel },
    /// Adds seeded zero-mean Gaussian noise.
    #[serde(rename = "noise")]
    GaussianNoise { sigma: f64, seed: u64, target: Channel },
    /// Magnifies content about the volume center; dims are preserved.
    Zoom { factor: f64 },
}

/// Flat wire form, so that stray keys are rejected for every kind.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    kind: String,
    axis: Option<u8>,
    plane: Option<Plane>,
    k: Option<u8>,
    offset_fraction: Option<f64>,
    sigma: Option<f64>,
    seed: Option<u64>,
    target: Option<Channel>,
    factor: Option<f64>,
}

impl TryFrom<RawSpec> for TransformSpec {
    type Error = String;

    fn try_from(r: RawSpec) -> std::result::Result<Self, String> {
        fn need<T>(v: Option<T>, kind: &str, field: &str) -> std::result::Result<T, String> {
            v.ok_or_else(|| format!("augmentation kind `{kind}` requires `{field}`"))
        }
        let present = [
            ("axis", r.axis.is_some()),
            ("plane", r.plane.is_some()),
            ("k", r.k.is_some()),
            ("offset_fraction", r.offset_fraction.is_some()),
            ("sigma", r.sigma.is_some()),
            ("seed", r.seed.is_some()),
            ("target", r.target.is_some()),
            ("factor", r.factor.is_some()),
        ];
        let kind = r.kind.as_str();
        let (spec, allowed): (TransformSpec, &[&str]) = match kind {
            "identity" => (TransformSpec::Identity, &[]),
            "flip" => (TransformSpec::Flip { axis: need(r.axis, kind, "axis")? }, &["axis"]),
            "rotate90" => (
                TransformSpec::Rotate90 { plane: need(r.plane, kind, "plane")?, k: need(r.k, kind, "k")? },
                &["plane", "k"],
            ),
            "shift" => (
                TransformSpec::ShiftIntensity {
                    offset_fraction: need(r.offset_fraction, kind, "offset_fraction")?,
                    target: need(r.target, kind, "target")?,
                },
                &["offset_fraction", "target"],
            ),
            "noise" => (
                TransformSpec::GaussianNoise {
                    sigma: need(r.sigma, kind, "sigma")?,
                    seed: need(r.seed, kind, "seed")?,
                    target: need(r.target, kind, "target")?,
                },
                &["sigma", "seed", "target"],
            ),
            "zoom" => (TransformSpec::Zoom { factor: need(r.factor, kind, "factor")? }, &["factor"]),
            other => return Err(format!("unknown augmentation kind `{other}`")),
        };
        if let Some((field, _)) = present.iter().find(|(f, p)| *p && !allowed.contains(f)) {
            return Err(format!("field `{field}` is not valid for augmentation kind `{kind}`"));
        }
        Ok(spec)
    }
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::Identity => Ok(()),
            TransformSpec::Flip { axis } if (1..=3).contains(&axis) => Ok(()),
            TransformSpec::Flip { axis } => param(format!("flip axis must be 1, 2 or 3, got {axis}")),
            TransformSpec::Rotate90 { k, .. } if (1..=3).contains(&k) => Ok(()),
            TransformSpec::Rotate90 { k, .. } => param(format!("rotate90 k must be 1, 2 or 3, got {k}")),
            TransformSpec::ShiftIntensity { offset_fraction, .. }
                if (-1.0..=1.0).contains(&offset_fraction) =>
            {
                Ok(())
            }
            TransformSpec::ShiftIntensity { offset_fraction, .. } => {
                param(format!("shift offset_fraction must lie in [-1, 1], got {offset_fraction}"))
            }
            TransformSpec::GaussianNoise { sigma, .. } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            TransformSpec::GaussianNoise { sigma, .. } => {
                param(format!("noise sigma must be finite and >= 0, got {sigma}"))
            }
            TransformSpec::Zoom { factor } if (0.5..=2.0).contains(&factor) => Ok(()),
            TransformSpec::Zoom { factor } => param(format!("zoom factor must lie in [0.5, 2], got {factor}")),
        }
    }

    /// The spatial transform that undoes this one on a prediction map.
    pub fn inverse(&self) -> TransformSpec {
        match *self {
            TransformSpec::Rotate90 { plane, k } => TransformSpec::Rotate90 { plane, k: 4 - k },
            TransformSpec::Zoom { factor } => TransformSpec::Zoom { factor: 1.0 / factor },
            ref other => other.clone(),
        }
    }
}

pub fn is_spatial(spec: &TransformSpec) -> bool {
    matches!(
        spec,
        TransformSpec::Flip { .. } | TransformSpec::Rotate90 { .. } | TransformSpec::Zoom { .. }
    )
}

/// Copies voxels into `out_geom`, reading output voxel (x, y, z) from the
/// source coordinates returned by `src`.
fn permute(
    vol: &Volume3D,
    out_geom: Geometry,
    src: impl Fn([usize; 3]) -> [usize; 3],
) -> Volume3D {
    let [nx, ny, nz] = out_geom.dims;
    let g = vol.geometry();
    let data = vol.data();
    let mut out = Vec::with_capacity(out_geom.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let [sx, sy, sz] = src([x, y, z]);
                out.push(data[g.index(sx, sy, sz)]);
            }
        }
    }
    Volume3D::from_parts_unchecked(out_geom, out)
}

fn flip(vol: &Volume3D, axis: usize) -> Volume3D {
    let n = vol.dims()[axis];
    permute(vol, *vol.geometry(), |mut p| {
        p[axis] = n - 1 - p[axis];
        p
    })
}

/// One quarter turn: output (p, q) reads input (q_out, n_q - 1 - p_out).
fn rotate_once(vol: &Volume3D, plane: Plane) -> Volume3D {
    let (p, q) = plane.axes();
    let g = vol.geometry();
    let mut out = *g;
    out.dims.swap(p, q);
    out.spacing.swap(p, q);
    let nq = g.dims[q];
    permute(vol, out, |o| {
        let mut s = o;
        s[p] = o[q];
        s[q] = nq - 1 - o[p];
        s
    })
}

fn rotate(vol: &Volume3D, plane: Plane, k: u8) -> Volume3D {
    let mut v = vol.clone();
    for _ in 0..k % 4 {
        v = rotate_once(&v, plane);
    }
    v
}

fn shift(vol: &Volume3D, fraction: f64) -> Volume3D {
    let (lo, hi) = vol.min_max();
    let offset = fraction * (hi as f64 - lo as f64);
    let data = vol.data().iter().map(|&v| (v as f64 + offset) as f32).collect();
    Volume3D::from_parts_unchecked(*vol.geometry(), data)
}

fn add_noise(vol: &Volume3D, sigma: f64, seed: u64, stream: u64) -> Volume3D {
    if sigma == 0.0 {
        return vol.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (v as f64 + sigma * n) as f32
        })
        .collect();
    Volume3D::from_parts_unchecked(*vol.geometry(), data)
}

/// Applies only the spatial part of `spec` to a single volume; intensity
/// kinds and `Identity` return a copy.
pub fn apply_spatial(spec: &TransformSpec, vol: &Volume3D) -> Volume3D {
    match *spec {
        TransformSpec::Flip { axis } => flip(vol, axis as usize - 1),
        TransformSpec::Rotate90 { plane, k } => rotate(vol, plane, k),
        TransformSpec::Zoom { factor } => resample::zoom(vol, factor),
        _ => vol.clone(),
    }
}

/// Applies `spec` to a co-registered CT/PET pair.
pub fn apply(spec: &TransformSpec, ct: &Volume3D, pet: &Volume3D) -> Result<(Volume3D, Volume3D)> {
    spec.validate()?;
    if !geometry_match(ct, pet) {
        return param(format!(
            "CT geometry {:?} does not match PET geometry {:?}",
            ct.geometry(),
            pet.geometry()
        ));
    }
    Ok(match *spec {
        TransformSpec::Identity => (ct.clone(), pet.clone()),
        TransformSpec::Flip { .. } | TransformSpec::Rotate90 { .. } | TransformSpec::Zoom { .. } => {
            (apply_spatial(spec, ct), apply_spatial(spec, pet))
        }
        TransformSpec::ShiftIntensity { offset_fraction, target } => (
            if target.hits_ct() { shift(ct, offset_fraction) } else { ct.clone() },
            if target.hits_pet() { shift(pet, offset_fraction) } else { pet.clone() },
        ),
        TransformSpec::GaussianNoise { sigma, seed, target } => (
            if target.hits_ct() { add_noise(ct, sigma, seed, 0) } else { ct.clone() },
            if target.hits_pet() { add_noise(pet, sigma, seed, 1) } else { pet.clone() },
        ),
    })
}

/// Maps a prediction made on augmented input back to the reference frame.
pub fn invert_on_prediction(spec: &TransformSpec, prob: &Volume3D) -> Volume3D {
    if is_spatial(spec) {
        apply_spatial(&spec.inverse(), prob)
    } else {
        prob.clone()
    }
}

/// Ordered augmentation list; index `i` is the index of coefficient ω_i.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TransformSpec>", into = "Vec<TransformSpec>")]
pub struct AugmentationSet {
    specs: Vec<TransformSpec>,
}

impl AugmentationSet {
    pub fn new(specs: Vec<TransformSpec>) -> Result<Self> {
        match specs.first() {
            None => return param("augmentation set is empty"),
            Some(TransformSpec::Identity) => {}
            Some(other) => return param(format!("first augmentation must be identity, got {other:?}")),
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if specs[..i].contains(s) {
                return param(format!("duplicate augmentation {s:?} at index {i}"));
            }
        }
        Ok(AugmentationSet { specs })
    }

    pub fn identity_only() -> Self {
        AugmentationSet { specs: vec![TransformSpec::Identity] }
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

impl TryFrom<Vec<TransformSpec>> for AugmentationSet {
    type Error = crate::Error;

    fn try_from(specs: Vec<TransformSpec>) -> Result<Self> {
        Self::new(specs)
    }
}

impl From<AugmentationSet> for Vec<TransformSpec> {
    fn from(set: AugmentationSet) -> Self {
        set.specs
    }
}

impl Default for AugmentationSet {
    fn default() -> Self {
        default_augmentation_set()
    }
}

/// Identity, the three axis flips, one quarter turn, CT/PET intensity
/// shifts of 10%, CT/PET noise at sigma 0.05, and zoom by 1.1 and 0.9.
pub fn default_augmentation_set() -> AugmentationSet {
    use TransformSpec::*;
    AugmentationSet::new(vec![
        Identity,
        Flip { axis: 1 },
        Flip { axis: 2 },
        Flip { axis: 3 },
        Rotate90 { plane: Plane::Xy, k: 1 },
        ShiftIntensity { offset_fraction: 0.10, target: Channel::Ct },
        ShiftIntensity { offset_fraction: 0.10, target: Channel::Pet },
        GaussianNoise { sigma: 0.05, seed: 7, target: Channel::Ct },
        GaussianNoise { sigma: 0.05, seed: 7, target: Channel::Pet },
        Zoom { factor: 1.1 },
        Zoom { factor: 0.9 },
    ])
    .expect("default augmentation set is valid")
}
