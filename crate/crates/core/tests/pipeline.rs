mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ttafuse_core::augment::{default_augmentation_set, AugmentationSet, TransformSpec};
use ttafuse_core::coeffopt::{
    grid_search, heuristic_weights, measure_improvements, optimize, Method, Objective, OptimizeOptions,
    PredictionCache, ValidationCase,
};
use ttafuse_core::fusion::{binarize, fuse, tta_predict, CoefficientVector};
use ttafuse_core::io::{read_fixture, read_mask, read_nifti};
use ttafuse_core::metrics::{dice, evaluate, Connectivity};
use ttafuse_core::phantom::{generate_case, write_case_fixtures, write_case_nifti, PhantomParams};
use ttafuse_core::predictor::{OracleParams, Predictor, SyntheticOracle};
use ttafuse_core::preprocess::{foreground_bbox, PreprocessConfig};
use ttafuse_core::{Result, Volume3D};

use common::*;

fn small() -> PhantomParams {
    PhantomParams { dims: [32, 32, 32], n_lesions: (2, 3), ..Default::default() }
}

fn flips() -> AugmentationSet {
    AugmentationSet::new(vec![
        TransformSpec::Identity,
        TransformSpec::Flip { axis: 1 },
        TransformSpec::Flip { axis: 2 },
        TransformSpec::Flip { axis: 3 },
    ])
    .unwrap()
}

struct Counting<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: Predictor> Predictor for Counting<P> {
    fn predict(&self, ct: &Volume3D, pet: &Volume3D, case_id: &str, aug_index: usize) -> Result<Volume3D> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(ct, pet, case_id, aug_index)
    }
}

#[test]
fn identity_only_tta_equals_binarized_prediction() {
    let case = &validation_suite(&small(), 1, 3)[0];
    let oracle = SyntheticOracle::new(OracleParams { noise_sigma: 0.1, ..Default::default() }).unwrap();
    let mask = tta_predict(
        &oracle,
        &case.case_id,
        &case.ct,
        &case.pet,
        &AugmentationSet::identity_only(),
        &CoefficientVector::uniform(1),
        0.5,
    )
    .unwrap();
    let raw = oracle.predict(&case.ct, &case.pet, &case.case_id, 0).unwrap();
    assert_eq!(mask, binarize(&raw, 0.5).unwrap());
}

#[test]
fn flip_only_tta_matches_single_prediction_for_clean_oracle() {
    let case = &validation_suite(&small(), 1, 4)[0];
    let oracle = SyntheticOracle::new(OracleParams::default()).unwrap();
    let tta = tta_predict(&oracle, "c", &case.ct, &case.pet, &flips(), &CoefficientVector::uniform(4), 0.5).unwrap();
    let single = binarize(&oracle.predict(&case.ct, &case.pet, "c", 0).unwrap(), 0.5).unwrap();
    assert_eq!(tta, single);
}

#[test]
fn clean_oracle_recovers_phantom_truth() {
    for case in validation_suite(&small(), 3, 8) {
        let oracle = SyntheticOracle::new(OracleParams::default()).unwrap();
        let pred = binarize(&oracle.predict(&case.ct, &case.pet, &case.case_id, 0).unwrap(), 0.5).unwrap();
        assert!(dice(&pred, &case.gt).unwrap() >= 0.95);
    }
}

#[test]
fn uniform_default_set_beats_worst_single_augmentation() {
    let cases = validation_suite(&small(), 3, 12);
    let oracle = SyntheticOracle::new(OracleParams { noise_sigma: 0.1, ..Default::default() }).unwrap();
    let augs = default_augmentation_set();
    let cache = PredictionCache::build(&oracle, &cases, &augs).unwrap();
    for (preds, gt) in cache.entries() {
        let fused = binarize(&fuse(preds, &CoefficientVector::uniform(augs.len())).unwrap(), 0.5).unwrap();
        let fused_dice = dice(&fused, gt).unwrap();
        let worst = preds
            .maps()
            .iter()
            .map(|m| dice(&binarize(m, 0.5).unwrap(), gt).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(fused_dice >= worst, "{}: {fused_dice} < {worst}", preds.case_id);
    }
}

#[test]
fn improvements_have_expected_signs() {
    let cases = validation_suite(&small(), 3, 21);
    let clean = SyntheticOracle::new(OracleParams::default()).unwrap();
    let t = measure_improvements(&clean, &cases, &flips(), 0.5).unwrap();
    assert!(t.deltas.iter().all(|&d| d == 0.0), "{:?}", t.deltas);

    let bias: BTreeMap<usize, f64> = [(1, 0.2)].into_iter().collect();
    let under = SyntheticOracle::new(OracleParams { pet_threshold: 0.26, per_augmentation_bias: bias, ..Default::default() })
        .unwrap();
    let t = measure_improvements(&under, &cases, &flips(), 0.5).unwrap();
    assert!(t.deltas[1] > 0.0, "{:?}", t.deltas);
    assert!(measure_improvements(&under, &[], &flips(), 0.5).is_err());
}

#[test]
fn predictor_runs_once_per_case_and_augmentation() {
    let cases = validation_suite(&small(), 2, 5);
    let counting = Counting { inner: SyntheticOracle::new(central_claim_oracle()).unwrap(), calls: AtomicUsize::new(0) };
    let augs = central_claim_augs();
    let r = optimize(&counting, &cases, &augs, Method::Ascent, &OptimizeOptions::default()).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), cases.len() * augs.len());
    assert!(r.objective >= r.heuristic_objective);
    assert!(r.evaluations > 1);
}

#[test]
fn compacted_objective_equals_explicit_pipeline() {
    let cases = validation_suite(&small(), 2, 31);
    let oracle = SyntheticOracle::new(central_claim_oracle()).unwrap();
    let augs = central_claim_augs();
    let cache = PredictionCache::build(&oracle, &cases, &augs).unwrap();
    let obj = Objective::new(&cache, 0.5).unwrap();
    let ws = [
        CoefficientVector::uniform(6),
        CoefficientVector::one_hot(6, 3, 6.0),
        CoefficientVector::new(vec![0.3, 0.0, 1.2, 2.5, 1.0, 1.0], 6.0).unwrap(),
    ];
    for w in &ws {
        let explicit: Vec<f64> = cases
            .iter()
            .map(|c| {
                let mask = tta_predict(&oracle, &c.case_id, &c.ct, &c.pet, &augs, w, 0.5).unwrap();
                dice(&mask, &c.gt).unwrap()
            })
            .collect();
        assert_eq!(obj.per_case_dice(w), explicit);
    }
}

#[test]
fn grid_is_at_least_heuristic() {
    let cases = validation_suite(&small(), 2, 41);
    let oracle = SyntheticOracle::new(central_claim_oracle()).unwrap();
    let augs = AugmentationSet::new(central_claim_augs().specs()[..3].to_vec()).unwrap();
    let cache = PredictionCache::build(&oracle, &cases, &augs).unwrap();
    let obj = Objective::new(&cache, 0.5).unwrap();
    let t = ttafuse_core::coeffopt::measure_improvements_cached(&cache, 0.5).unwrap();
    let h = heuristic_weights(&t, 3.0, 0.01).unwrap();
    let g = grid_search(&obj, 3.0, 0.1).unwrap();
    assert!(g.objective >= obj.evaluate(&h));
}

#[test]
fn phantom_writers_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let case = generate_case(&small(), 6, 1).unwrap();
    let d = write_case_fixtures(&case, dir.path()).unwrap();
    assert_eq!(read_fixture(d.join("ct.json")).unwrap(), case.ct);
    assert_eq!(read_fixture(d.join("pet.raw")).unwrap(), case.pet);
    let d = write_case_nifti(&case, dir.path().join("nii")).unwrap();
    assert_eq!(read_nifti(d.join("pet.nii.gz")).unwrap().data(), case.pet.data());
    assert_eq!(read_mask(d.join("seg.nii.gz")).unwrap(), case.gt);
}

#[test]
fn phantom_bbox_matches_brute_force() {
    let case = generate_case(&small(), 2, 0).unwrap();
    let pp = PreprocessConfig::default();
    let prepared = pp.apply(&case.ct, &case.pet).unwrap();
    let scaled: Vec<f32> = case.ct.data().iter().map(|&v| pp.ct_window.apply(v)).collect();
    let thr = pp.effective_crop_threshold() as f32;
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    for (i, &v) in scaled.iter().enumerate() {
        if v > thr {
            let p = case.ct.geometry().coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
        }
    }
    assert_eq!(prepared.bbox.lo, lo);
    assert_eq!(prepared.bbox.hi, hi);
    let scaled_vol = case.ct.with_data(scaled).unwrap();
    assert_eq!(foreground_bbox(&scaled_vol, thr, 0), prepared.bbox);
}

#[test]
fn evaluation_composes_metric_oracles() {
    let cases: Vec<ValidationCase> = validation_suite(&small(), 3, 51);
    let oracle = SyntheticOracle::new(OracleParams { pet_threshold: 0.25, noise_sigma: 0.2, ..Default::default() }).unwrap();
    let preds: Vec<_> = cases
        .iter()
        .map(|c| binarize(&oracle.predict(&c.ct, &c.pet, &c.case_id, 0).unwrap(), 0.5).unwrap())
        .collect();
    let conn = Connectivity::TwentySix;
    let report = evaluate(cases.iter().zip(&preds).map(|(c, p)| (c.case_id.as_str(), p, &c.gt)), conn).unwrap();
    for ((score, c), p) in report.per_case.iter().zip(&cases).zip(&preds) {
        assert_eq!(score.dice, oracle_dice(p, &c.gt));
        assert_eq!(score.fp_volume_ml, oracle_fp(p, &c.gt, conn));
        assert_eq!(score.fn_volume_ml, oracle_fn(p, &c.gt, conn));
    }
}
