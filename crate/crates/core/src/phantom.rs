//! Seeded CT/PET phantoms with known lesion masks.
//!
//! CT is a smooth soft-tissue ellipsoid in air plus Gaussian noise (HU). PET
//! is a uniform uptake background inside the body plus Gaussian hot spots
//! (SUV). The ground truth is every voxel whose window-scaled PET exceeds
//! the synthetic oracle's default threshold, so an oracle without noise or
//! bias recovers it almost exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::io::{write_fixture, write_mask, write_nifti};
use crate::predictor::OracleParams;
use crate::preprocess::ScaleWindow;
use crate::volume::{Geometry, MaskVolume, Volume3D};

pub const AIR_HU: f32 = -1000.0;
pub const TISSUE_HU: f32 = 150.0;
pub const BACKGROUND_SUV: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range of lesions per case.
    pub n_lesions: (usize, usize),
    /// Lesion peak uptake above background, SUV.
    pub lesion_peak: (f64, f64),
    /// Lesion Gaussian width, voxels.
    pub lesion_sigma: (f64, f64),
    pub ct_noise_hu: f64,
    /// Background uptake noise, SUV; background stays within ±0.5 of its mean.
    pub pet_noise: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [64, 64, 64],
            spacing: [2.0, 2.0, 2.0],
            n_lesions: (1, 4),
            lesion_peak: (6.0, 12.0),
            lesion_sigma: (1.5, 3.5),
            ct_noise_hu: 10.0,
            pet_noise: 0.1,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return param(format!("phantom dims must be at least 16 per axis, got {:?}", self.dims));
        }
        if self.n_lesions.0 > self.n_lesions.1 {
            return param("n_lesions range is reversed");
        }
        for (name, (lo, hi)) in [("lesion_peak", self.lesion_peak), ("lesion_sigma", self.lesion_sigma)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return param(format!("{name} must be a positive range, got ({lo}, {hi})"));
            }
        }
        if !(self.ct_noise_hu >= 0.0 && self.pet_noise >= 0.0) {
            return param("noise levels must be >= 0");
        }
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub peak: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub case_id: String,
    pub ct: Volume3D,
    pub pet: Volume3D,
    pub gt: MaskVolume,
    pub lesions: Vec<Lesion>,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Ground truth for a raw SUV volume: scaled PET above the default oracle
/// threshold.
pub fn lesion_mask(pet: &Volume3D) -> MaskVolume {
    let window = ScaleWindow::pet_default();
    let thr = OracleParams::default().pet_threshold;
    let data = pet.data().iter().map(|&v| (window.apply(v) as f64 > thr) as u8).collect();
    MaskVolume::new(*pet.geometry(), data).expect("same geometry")
}

/// Generates case `index` of the suite seeded by `seed`.
pub fn generate_case(params: &PhantomParams, seed: u64, index: usize) -> Result<PhantomCase> {
    params.validate()?;
    let g = Geometry::new(params.dims, params.spacing, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let dims = params.dims.map(|d| d as f64);
    let center = dims.map(|d| (d - 1.0) / 2.0);
    // body semi-axes in voxels, jittered per case
    let semi = [0.40, 0.34, 0.45].map(|f| f * rng.random_range(0.9..1.0));
    let semi = [0, 1, 2].map(|a| semi[a] * dims[a]);
    let body_r = |p: [f64; 3]| -> f64 {
        (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum::<f64>().sqrt()
    };

    let k = rng.random_range(params.n_lesions.0..=params.n_lesions.1);
    let lesions: Vec<Lesion> = (0..k)
        .map(|_| {
            // rejection-sample a center well inside the body
            let c = loop {
                let p = [0, 1, 2].map(|a| center[a] + rng.random_range(-1.0..1.0) * semi[a]);
                if body_r(p) < 0.6 {
                    break p;
                }
            };
            Lesion {
                center: c,
                peak: rng.random_range(params.lesion_peak.0..=params.lesion_peak.1),
                sigma: rng.random_range(params.lesion_sigma.0..=params.lesion_sigma.1),
            }
        })
        .collect();

    let ct_noise = Normal::new(0.0, params.ct_noise_hu).map_err(|e| crate::Error::Parameter(e.to_string()))?;
    let pet_noise = Normal::new(0.0, params.pet_noise).map_err(|e| crate::Error::Parameter(e.to_string()))?;
    let n = g.len();
    let mut ct = Vec::with_capacity(n);
    let mut pet = Vec::with_capacity(n);
    for i in 0..n {
        let p = g.coords(i).map(|c| c as f64);
        // logistic edge about one voxel wide
        let r = body_r(p);
        let inside = 1.0 / (1.0 + ((r - 1.0) * semi.iter().cloned().fold(f64::INFINITY, f64::min)).exp());
        let hu = AIR_HU as f64 + (TISSUE_HU - AIR_HU) as f64 * inside + ct_noise.sample(&mut rng);
        ct.push(hu as f32);

        let bg = (BACKGROUND_SUV as f64 + pet_noise.sample(&mut rng).clamp(-0.5, 0.5)) * inside;
        let hot: f64 = lesions
            .iter()
            .map(|l| {
                let d2: f64 = (0..3).map(|a| (p[a] - l.center[a]).powi(2)).sum();
                l.peak * (-d2 / (2.0 * l.sigma * l.sigma)).exp()
            })
            .sum();
        pet.push((bg + hot) as f32);
    }
    let ct = Volume3D::new(g, ct)?;
    let pet = Volume3D::new(g, pet)?;
    let gt = lesion_mask(&pet);
    Ok(PhantomCase { case_id: case_id(index), ct, pet, gt, lesions })
}

pub fn generate_suite(params: &PhantomParams, n_cases: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    use rayon::prelude::*;
    (0..n_cases).into_par_iter().map(|i| generate_case(params, seed, i)).collect()
}

/// Writes `<dir>/<case_id>/{ct,pet,seg}.nii.gz`.
pub fn write_case_nifti(case: &PhantomCase, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let d = dir.as_ref().join(&case.case_id);
    fs::create_dir_all(&d)?;
    write_nifti(&case.ct, d.join("ct.nii.gz"))?;
    write_nifti(&case.pet, d.join("pet.nii.gz"))?;
    write_mask(&case.gt, d.join("seg.nii.gz"))?;
    Ok(d)
}

/// Writes `<dir>/<case_id>/{ct,pet,seg}.{json,raw}` fixtures.
pub fn write_case_fixtures(case: &PhantomCase, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let d = dir.as_ref().join(&case.case_id);
    fs::create_dir_all(&d)?;
    write_fixture(&case.ct, d.join("ct.json"))?;
    write_fixture(&case.pet, d.join("pet.json"))?;
    write_fixture(&case.gt.to_volume(), d.join("seg.json"))?;
    Ok(d)
}
