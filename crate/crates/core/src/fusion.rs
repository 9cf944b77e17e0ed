//! Weighted fusion of aligned per-augmentation predictions.
//!
//! For coefficients ω with `Σ ω_i = n`, the fused map is
//! `(1/n) Σ ω_i A_i` voxelwise, where `A_i` is the prediction made on the
//! `i`-th augmented input after mapping it back to the reference frame.
//! With `n = m` and every `ω_i = 1` this is the plain TTA mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, invert_on_prediction, AugmentationSet};
use crate::error::{param, Error, Result};
use crate::predictor::{checked_predict, Predictor};
use crate::volume::{geometry_match, Geometry, MaskVolume, Volume3D};

/// Relative tolerance on `Σ ω_i = n`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default binarization threshold.
pub const DEFAULT_THETA: f64 = 0.5;

/// Nonnegative contribution coefficients with `Σ ω_i = n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCoefficients")]
pub struct CoefficientVector {
    n: f64,
    omegas: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    n: f64,
    omegas: Vec<f64>,
}

impl TryFrom<RawCoefficients> for CoefficientVector {
    type Error = Error;

    fn try_from(r: RawCoefficients) -> Result<Self> {
        CoefficientVector::new(r.omegas, r.n)
    }
}

impl CoefficientVector {
    pub fn new(omegas: Vec<f64>, n: f64) -> Result<Self> {
        if omegas.is_empty() {
            return param("coefficient vector is empty");
        }
        if !(n > 0.0) || !n.is_finite() {
            return param(format!("normalizer n must be positive, got {n}"));
        }
        if let Some(w) = omegas.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return param(format!("coefficients must be finite and nonnegative, got {w}"));
        }
        let sum: f64 = omegas.iter().sum();
        if (sum - n).abs() > SUM_TOLERANCE * n {
            return param(format!("coefficients sum to {sum}, expected n = {n}"));
        }
        Ok(CoefficientVector { n, omegas })
    }

    /// `ω_i = 1` for all `i`, `n = m`.
    pub fn uniform(m: usize) -> Self {
        CoefficientVector { n: m as f64, omegas: vec![1.0; m] }
    }

    /// All weight on index `i`.
    pub fn one_hot(m: usize, i: usize, n: f64) -> Self {
        let mut omegas = vec![0.0; m];
        omegas[i] = n;
        CoefficientVector { n, omegas }
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }
}

/// Per-augmentation probability maps of one case, all in the reference
/// frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub case_id: String,
    maps: Vec<Volume3D>,
}

impl PredictionSet {
    pub fn new(case_id: impl Into<String>, maps: Vec<Volume3D>) -> Result<Self> {
        let case_id = case_id.into();
        let Some(first) = maps.first() else {
            return param(format!("case {case_id}: prediction set is empty"));
        };
        for (i, m) in maps.iter().enumerate() {
            if !geometry_match(first, m) {
                return Err(Error::ContractViolation(format!(
                    "case {case_id}: map {i} geometry {:?} differs from map 0",
                    m.geometry()
                )));
            }
            if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::ContractViolation(format!(
                    "case {case_id}: map {i} has values outside [0, 1]"
                )));
            }
        }
        Ok(PredictionSet { case_id, maps })
    }

    pub fn maps(&self) -> &[Volume3D] {
        &self.maps
    }

    pub fn geometry(&self) -> &Geometry {
        self.maps[0].geometry()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Fuses one voxel. Accumulates in index order so the result never depends
/// on the order predictions arrived in, then clamps to the convex hull of
/// the inputs to absorb rounding.
#[inline]
pub(crate) fn fuse_voxel(values: impl Iterator<Item = f32>, omegas: &[f64], n: f64) -> f32 {
    let mut acc = 0.0f64;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (v, w) in values.zip(omegas) {
        acc += w * v as f64;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ((acc / n) as f32).clamp(lo, hi)
}

#[inline]
pub(crate) fn is_foreground(v: f32, theta: f64) -> bool {
    v as f64 >= theta
}

/// Voxelwise `(1/n) Σ ω_i · map_i`.
pub fn fuse(preds: &PredictionSet, w: &CoefficientVector) -> Result<Volume3D> {
    if preds.len() != w.len() {
        return param(format!(
            "{} prediction maps but {} coefficients",
            preds.len(),
            w.len()
        ));
    }
    CoefficientVector::new(w.omegas.clone(), w.n)?;
    let maps: Vec<&[f32]> = preds.maps.iter().map(|m| m.data()).collect();
    let len = maps[0].len();
    let data: Vec<f32> = (0..len)
        .into_par_iter()
        .with_min_len(4096)
        .map(|i| fuse_voxel(maps.iter().map(|m| m[i]), &w.omegas, w.n))
        .collect();
    Ok(Volume3D::from_parts_unchecked(*preds.geometry(), data))
}

pub fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return param(format!("threshold must lie in (0, 1), got {theta}"));
    }
    Ok(())
}

/// Foreground where `prob >= theta`.
pub fn binarize(prob: &Volume3D, theta: f64) -> Result<MaskVolume> {
    check_theta(theta)?;
    let data = prob.data().iter().map(|&v| u8::from(is_foreground(v, theta))).collect();
    MaskVolume::new(*prob.geometry(), data)
}

/// Runs the predictor on every augmentation of one case and maps each
/// prediction back to the reference frame.
pub fn collect_predictions(
    predictor: &dyn Predictor,
    case_id: &str,
    ct: &Volume3D,
    pet: &Volume3D,
    augs: &AugmentationSet,
) -> Result<PredictionSet> {
    if !geometry_match(ct, pet) {
        return param(format!("case {case_id}: CT and PET geometry differ"));
    }
    let maps = augs
        .specs()
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let (ct_i, pet_i) = apply(spec, ct, pet)?;
            let p_i = checked_predict(predictor, &ct_i, &pet_i, case_id, i)?;
            let q_i = invert_on_prediction(spec, &p_i);
            if !geometry_match(&q_i, ct) {
                return Err(Error::ContractViolation(format!(
                    "case {case_id}: aligned prediction {i} does not match the input geometry"
                )));
            }
            Ok(q_i)
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(case_id, maps)
}

/// Soft fused map and its binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaOutput {
    pub prob: Volume3D,
    pub mask: MaskVolume,
}

/// Full TTA inference for one case: augment, predict, align, fuse,
/// binarize.
pub fn tta_predict_detailed(
    predictor: &dyn Predictor,
    case_id: &str,
    ct: &Volume3D,
    pet: &Volume3D,
    augs: &AugmentationSet,
    w: &CoefficientVector,
    theta: f64,
) -> Result<TtaOutput> {
    check_theta(theta)?;
    if w.len() != augs.len() {
        return param(format!("{} augmentations but {} coefficients", augs.len(), w.len()));
    }
    let preds = collect_predictions(predictor, case_id, ct, pet, augs)?;
    let prob = fuse(&preds, w)?;
    let mask = binarize(&prob, theta)?;
    Ok(TtaOutput { prob, mask })
}

pub fn tta_predict(
    predictor: &dyn Predictor,
    case_id: &str,
    ct: &Volume3D,
    pet: &Volume3D,
    augs: &AugmentationSet,
    w: &CoefficientVector,
    theta: f64,
) -> Result<MaskVolume> {
    Ok(tta_predict_detailed(predictor, case_id, ct, pet, augs, w, theta)?.mask)
}
