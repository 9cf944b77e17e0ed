//! Independent reference implementations and fixtures shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use ttafuse_core::augment::{AugmentationSet, Channel, TransformSpec};
use ttafuse_core::coeffopt::ValidationCase;
use ttafuse_core::metrics::Connectivity;
use ttafuse_core::phantom::{generate_suite, PhantomParams};
use ttafuse_core::predictor::OracleParams;
use ttafuse_core::preprocess::{crop_mask, PreprocessConfig};
use ttafuse_core::{Geometry, MaskVolume, Volume3D};

/// Components of `mask` found by breadth-first flood fill, each as a list
/// of (x, y, z) voxels.
pub fn flood_fill(mask: &MaskVolume, conn: Connectivity) -> Vec<Vec<[usize; 3]>> {
    let [nx, ny, nz] = mask.dims();
    let mut seen = vec![vec![vec![false; nz]; ny]; nx];
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) || seen[x][y][z] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut queue = VecDeque::from([[x, y, z]]);
                seen[x][y][z] = true;
                while let Some(p) = queue.pop_front() {
                    comp.push(p);
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dz in -1i64..=1 {
                                let manhattan = dx.abs() + dy.abs() + dz.abs();
                                let ok = match conn {
                                    Connectivity::Six => manhattan == 1,
                                    Connectivity::Eighteen => manhattan == 1 || manhattan == 2,
                                    Connectivity::TwentySix => manhattan >= 1,
                                };
                                if !ok {
                                    continue;
                                }
                                let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                                if q[0] < 0 || q[1] < 0 || q[2] < 0 {
                                    continue;
                                }
                                let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                                if q[0] >= nx || q[1] >= ny || q[2] >= nz {
                                    continue;
                                }
                                if mask.get(q[0], q[1], q[2]) && !seen[q[0]][q[1]][q[2]] {
                                    seen[q[0]][q[1]][q[2]] = true;
                                    queue.push_back(q);
                                }
                            }
                        }
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

pub fn oracle_dice(pred: &MaskVolume, gt: &MaskVolume) -> f64 {
    let [nx, ny, nz] = pred.dims();
    let (mut i, mut p, mut g) = (0usize, 0usize, 0usize);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (a, b) = (pred.get(x, y, z), gt.get(x, y, z));
                i += (a && b) as usize;
                p += a as usize;
                g += b as usize;
            }
        }
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

fn oracle_untouched(a: &MaskVolume, b: &MaskVolume, conn: Connectivity) -> f64 {
    let voxels: usize = flood_fill(a, conn)
        .into_iter()
        .filter(|c| c.iter().all(|&[x, y, z]| !b.get(x, y, z)))
        .map(|c| c.len())
        .sum();
    let s = a.geometry().spacing;
    voxels as f64 * (s[0] * s[1] * s[2] / 1000.0)
}

pub fn oracle_fp(pred: &MaskVolume, gt: &MaskVolume, conn: Connectivity) -> f64 {
    oracle_untouched(pred, gt, conn)
}

pub fn oracle_fn(pred: &MaskVolume, gt: &MaskVolume, conn: Connectivity) -> f64 {
    oracle_untouched(gt, pred, conn)
}

pub fn random_mask(rng: &mut impl Rng, g: Geometry, density: f64) -> MaskVolume {
    MaskVolume::from_fn(g, |_, _, _| rng.random_bool(density)).unwrap()
}

pub fn random_volume(rng: &mut impl Rng, g: Geometry, lo: f32, hi: f32) -> Volume3D {
    Volume3D::from_fn(g, |_, _, _| rng.random_range(lo..hi)).unwrap()
}

/// Sum of a few Gaussian blobs kept away from the borders.
pub fn smooth_field(rng: &mut impl Rng, dims: [usize; 3]) -> Volume3D {
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            let centre = [0, 1, 2].map(|a| c[a] + rng.random_range(-0.35..0.35) * c[a]);
            (centre, rng.random_range(0.3..1.0), rng.random_range(4.0..6.0))
        })
        .collect();
    Volume3D::from_fn(Geometry::with_dims(dims).unwrap(), |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let v: f64 = blobs
            .iter()
            .map(|(ctr, amp, s)| {
                let d2: f64 = (0..3).map(|a| (p[a] - ctr[a]).powi(2)).sum();
                amp * (-d2 / (2.0 * s * s)).exp()
            })
            .sum();
        v as f32
    })
    .unwrap()
}

/// Generates, preprocesses and crops a phantom suite.
pub fn validation_suite(params: &PhantomParams, n_cases: usize, seed: u64) -> Vec<ValidationCase> {
    let pp = PreprocessConfig::default();
    generate_suite(params, n_cases, seed)
        .unwrap()
        .into_iter()
        .map(|c| {
            let p = pp.apply(&c.ct, &c.pet).unwrap();
            let gt = crop_mask(&c.gt, &p.bbox).unwrap();
            ValidationCase::new(c.case_id, p.ct, p.pet, gt).unwrap()
        })
        .collect()
}

/// Six augmentations whose oracle predictions differ only through bias and
/// noise: 1–3 helpful, 4–5 harmful.
pub fn central_claim_augs() -> AugmentationSet {
    AugmentationSet::new(vec![
        TransformSpec::Identity,
        TransformSpec::Flip { axis: 1 },
        TransformSpec::Flip { axis: 2 },
        TransformSpec::Flip { axis: 3 },
        TransformSpec::ShiftIntensity { offset_fraction: 0.05, target: Channel::Ct },
        TransformSpec::GaussianNoise { sigma: 0.05, seed: 7, target: Channel::Ct },
    ])
    .unwrap()
}

/// Oracle whose threshold sits above the ground-truth level, so the
/// identity prediction under-segments and a positive bias helps.
pub fn central_claim_oracle() -> OracleParams {
    let bias: BTreeMap<usize, f64> = [(1, 0.10), (2, 0.15), (3, 0.20), (4, -0.15), (5, -0.15)].into_iter().collect();
    OracleParams { pet_threshold: 0.26, softness: 0.02, per_augmentation_bias: bias, noise_sigma: 0.08, seed: 1 }
}
