use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;
use ttafuse_cli::{main_with_args, EXIT_DATA, EXIT_PREDICTOR, EXIT_USAGE};
use ttafuse_core::augment::{default_augmentation_set, AugmentationSet};
use ttafuse_core::coeffopt::{grid_search, Objective, PredictionCache, ValidationCase};
use ttafuse_core::fusion::{binarize, tta_predict, CoefficientVector};
use ttafuse_core::io::{read_mask, read_nifti, write_nifti};
use ttafuse_core::predictor::{OracleParams, PredictorBinding, SyntheticOracle};
use ttafuse_core::{Geometry, Volume3D};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["ttafuse"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, doc: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

/// Phantom dataset, preprocessed.
fn dataset(n: usize, seed: &str) -> (TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let pre = tmp.path().join("pre");
    assert_eq!(run(&["--seed", seed, "synth", "--out", p(&raw), "--cases", &n.to_string(), "--dims", "24,24,24"]), 0);
    assert_eq!(run(&["preprocess", "--in", p(&raw), "--out", p(&pre)]), 0);
    (tmp, raw, pre)
}

fn oracle_doc() -> Value {
    json!({"mode": "synthetic_oracle", "pet_threshold": 0.26, "noise_sigma": 0.08, "seed": 3,
           "per_augmentation_bias": {"1": 0.15, "2": -0.15}})
}

fn flip3() -> Value {
    json!([{"kind": "identity"}, {"kind": "flip", "axis": 1}, {"kind": "flip", "axis": 2}])
}

#[test]
fn synth_is_deterministic_and_supports_negative_controls() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(run(&["--seed", "5", "synth", "--out", p(d), "--cases", "2", "--dims", "16,20,18"]), 0);
    }
    for f in ["case_000/ct.nii.gz", "case_001/pet.nii.gz", "case_001/seg.nii.gz"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(run(&["synth", "--out", p(&c), "--cases", "1", "--dims", "16,16,16", "--lesions", "0,0"]), 0);
    assert!(read_mask(c.join("case_000/seg.nii.gz")).unwrap().is_all_background());
    assert_eq!(run(&["synth", "--out", p(&c), "--dims", "8,16,16"]), EXIT_USAGE);
}

#[test]
fn preprocess_writes_brute_force_bbox() {
    let (_tmp, raw, pre) = dataset(2, "1");
    let ct = read_nifti(raw.join("case_000/ct.nii.gz")).unwrap();
    let rec: Value = serde_json::from_str(&fs::read_to_string(pre.join("case_000/bbox.json")).unwrap()).unwrap();
    // scaled CT above 1e-3 means raw HU above 100 + 150e-3
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    for (i, &v) in ct.data().iter().enumerate() {
        if ((v as f64 - 100.0) / 150.0) as f32 > 1e-3 {
            let c = ct.geometry().coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
    }
    assert_eq!(rec["lo"], json!(lo));
    assert_eq!(rec["hi"], json!(hi));
    assert_eq!(rec["full_dims"], json!([24, 24, 24]));
    let cropped = read_nifti(pre.join("case_000/ct.nii.gz")).unwrap();
    assert_eq!(cropped.dims(), [0, 1, 2].map(|a| hi[a] - lo[a]));
    assert!(pre.join("case_000/seg.nii.gz").exists());
}

#[test]
fn preprocess_zero_ct_keeps_full_volume_and_reports_missing_modality() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let g = Geometry::new([6, 5, 4], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
    fs::create_dir_all(raw.join("zero")).unwrap();
    write_nifti(&Volume3D::zeros(g), raw.join("zero/ct.nii.gz")).unwrap();
    write_nifti(&Volume3D::filled(g, 7.5), raw.join("zero/pet.nii")).unwrap();
    fs::create_dir_all(raw.join("broken")).unwrap();
    write_nifti(&Volume3D::zeros(g), raw.join("broken/ct.nii.gz")).unwrap();

    let out = tmp.path().join("out");
    assert_eq!(run(&["preprocess", "--in", p(&raw), "--out", p(&out)]), EXIT_DATA);
    let pet = read_nifti(out.join("zero/pet.nii.gz")).unwrap();
    assert_eq!(pet.dims(), [6, 5, 4]);
    assert!(pet.data().iter().all(|&v| v == 0.5));
    let rec: Value = serde_json::from_str(&fs::read_to_string(out.join("zero/bbox.json")).unwrap()).unwrap();
    assert_eq!(rec["lo"], json!([0, 0, 0]));
    assert_eq!(rec["hi"], json!([6, 5, 4]));
}

#[test]
fn preprocess_is_idempotent_under_identity_windows() {
    let (tmp, _raw, pre) = dataset(1, "2");
    let ident = json!({"in_min": 0, "in_max": 1, "out_min": 0, "out_max": 1, "clamp": false});
    let cfg = write_config(tmp.path(), "id.json", json!({"ct_window": ident, "pet_window": ident, "crop_threshold": -1e9}));
    let again = tmp.path().join("again");
    assert_eq!(run(&["--config", p(&cfg), "preprocess", "--in", p(&pre), "--out", p(&again)]), 0);
    for f in ["ct.nii.gz", "pet.nii.gz"] {
        let a = read_nifti(pre.join("case_000").join(f)).unwrap();
        let b = read_nifti(again.join("case_000").join(f)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.dims(), b.dims());
    }
}

#[test]
fn tta_requires_coefficients_before_predicting() {
    let (tmp, _raw, pre) = dataset(1, "3");
    // a precomputed binding without files would fail with a data error if it ran
    let cfg = write_config(tmp.path(), "c.json", json!({"predictor": {"mode": "precomputed", "directory": "/nonexistent"}}));
    let out = tmp.path().join("m.nii.gz");
    assert_eq!(run(&["--config", p(&cfg), "tta", "--case", p(&pre.join("case_000")), "--out", p(&out)]), EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn identity_only_tta_is_binarized_raw_prediction() {
    let (tmp, _raw, pre) = dataset(1, "4");
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({"augmentations": [{"kind": "identity"}], "coefficients": {"n": 1, "omegas": [1]},
               "predictor": oracle_doc()}),
    );
    let case = pre.join("case_000");
    let out = tmp.path().join("m.nii.gz");
    assert_eq!(run(&["--config", p(&cfg), "tta", "--case", p(&case), "--out", p(&out)]), 0);

    let PredictorBinding::SyntheticOracle(params) = serde_json::from_value(oracle_doc()).unwrap() else {
        panic!("oracle binding expected");
    };
    let oracle = SyntheticOracle::new(params).unwrap();
    let ct = read_nifti(case.join("ct.nii.gz")).unwrap();
    let pet = read_nifti(case.join("pet.nii.gz")).unwrap();
    use ttafuse_core::predictor::Predictor;
    let raw = binarize(&oracle.predict(&ct, &pet, "case_000", 0).unwrap(), 0.5).unwrap();
    let rec: Value = serde_json::from_str(&fs::read_to_string(case.join("bbox.json")).unwrap()).unwrap();
    let full: [usize; 3] = serde_json::from_value(rec["full_dims"].clone()).unwrap();
    let bbox = ttafuse_core::preprocess::BBox {
        lo: serde_json::from_value(rec["lo"].clone()).unwrap(),
        hi: serde_json::from_value(rec["hi"].clone()).unwrap(),
    };
    let expected = ttafuse_core::preprocess::uncrop_mask(&raw, &bbox, full).unwrap();
    assert_eq!(read_mask(&out).unwrap(), expected);
    assert!(tmp.path().join("m_prob.nii.gz").exists());
}

#[test]
fn cli_tta_matches_library() {
    let (tmp, _raw, pre) = dataset(1, "6");
    // drop the crop record so both sides work in the same frame
    let case = pre.join("case_000");
    fs::remove_file(case.join("bbox.json")).unwrap();
    let augs = default_augmentation_set();
    let w = CoefficientVector::uniform(augs.len());
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({"coefficients": w, "predictor": {"mode": "synthetic_oracle", "noise_sigma": 0.1, "seed": 2}}),
    );
    let out = tmp.path().join("m.nii");
    assert_eq!(run(&["--config", p(&cfg), "--jobs", "2", "tta", "--case", p(&case), "--out", p(&out)]), 0);

    let ct = read_nifti(case.join("ct.nii.gz")).unwrap();
    let pet = read_nifti(case.join("pet.nii.gz")).unwrap();
    let oracle = SyntheticOracle::new(OracleParams { noise_sigma: 0.1, seed: 2, ..Default::default() }).unwrap();
    let lib = tta_predict(&oracle, "case_000", &ct, &pet, &augs, &w, 0.5).unwrap();
    assert_eq!(read_mask(&out).unwrap(), lib);
}

#[test]
fn optimize_grid_matches_library_and_ascent_beats_heuristic() {
    let (tmp, _raw, pre) = dataset(3, "7");
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({"augmentations": flip3(), "predictor": oracle_doc(), "optimizer": {"grid_step": 0.1}}),
    );
    let grid_out = tmp.path().join("grid.json");
    assert_eq!(run(&["--config", p(&cfg), "optimize", "--val", p(&pre), "--out", p(&grid_out), "--method", "grid"]), 0);
    let cli_w: CoefficientVector = serde_json::from_str(&fs::read_to_string(&grid_out).unwrap()).unwrap();

    let cases: Vec<ValidationCase> = (0..3)
        .map(|i| {
            let d = pre.join(format!("case_{i:03}"));
            ValidationCase::new(
                format!("case_{i:03}"),
                read_nifti(d.join("ct.nii.gz")).unwrap(),
                read_nifti(d.join("pet.nii.gz")).unwrap(),
                read_mask(d.join("seg.nii.gz")).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let augs: AugmentationSet = serde_json::from_value(flip3()).unwrap();
    let binding: PredictorBinding = serde_json::from_value(oracle_doc()).unwrap();
    let predictor = binding.build().unwrap();
    let cache = PredictionCache::build(predictor.as_ref(), &cases, &augs).unwrap();
    let lib = grid_search(&Objective::new(&cache, 0.5).unwrap(), 3.0, 0.1).unwrap();
    assert_eq!(cli_w, lib.best);

    let asc_out = tmp.path().join("asc.json");
    assert_eq!(run(&["--config", p(&cfg), "optimize", "--val", p(&pre), "--out", p(&asc_out)]), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("asc.report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "ascent");
    assert!(report["objective"].as_f64().unwrap() >= report["heuristic_objective"].as_f64().unwrap());
}

#[test]
fn heuristic_on_symmetric_data_is_uniform() {
    let (tmp, _raw, pre) = dataset(2, "8");
    let cfg = write_config(tmp.path(), "c.json", json!({"augmentations": flip3()}));
    let out = tmp.path().join("h.json");
    assert_eq!(run(&["--config", p(&cfg), "optimize", "--val", p(&pre), "--out", p(&out), "--method", "heuristic"]), 0);
    let w: CoefficientVector = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(w.omegas().iter().all(|&x| (x - 1.0).abs() < 1e-12), "{w:?}");
}

#[test]
fn optimize_without_ground_truth_is_usage_error() {
    let (tmp, _raw, pre) = dataset(1, "9");
    fs::remove_file(pre.join("case_000/seg.nii.gz")).unwrap();
    let out = tmp.path().join("w.json");
    assert_eq!(run(&["optimize", "--val", p(&pre), "--out", p(&out)]), EXIT_USAGE);
}

#[test]
fn evaluate_self_and_missing_prediction() {
    let (tmp, raw, _pre) = dataset(2, "10");
    let report = tmp.path().join("r.json");
    assert_eq!(run(&["evaluate", "--pred", p(&raw), "--gt", p(&raw), "--report", p(&report)]), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["mean_dice"], 1.0);
    assert_eq!(r["mean_fp_volume_ml"], 0.0);
    assert_eq!(r["mean_fn_volume_ml"], 0.0);
    assert!(tmp.path().join("r.csv").exists());

    let preds = tmp.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    fs::copy(raw.join("case_000/seg.nii.gz"), preds.join("case_000.nii.gz")).unwrap();
    let report2 = tmp.path().join("r2.json");
    assert_eq!(run(&["evaluate", "--pred", p(&preds), "--gt", p(&raw), "--report", p(&report2)]), EXIT_DATA);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report2).unwrap()).unwrap();
    assert_eq!(r["unpaired"], json!(["case_001"]));
    assert_eq!(r["case_count"], 1);
}

#[test]
fn tta_output_folder_evaluates_without_soft_maps() {
    let (tmp, raw, pre) = dataset(2, "13");
    let w = CoefficientVector::uniform(default_augmentation_set().len());
    let cfg = write_config(tmp.path(), "c.json", json!({"coefficients": w}));
    let preds = tmp.path().join("preds");
    for id in ["case_000", "case_001"] {
        let out = preds.join(format!("{id}.nii.gz"));
        assert_eq!(run(&["--config", p(&cfg), "tta", "--case", p(&pre.join(id)), "--out", p(&out)]), 0);
    }
    assert!(preds.join("case_000_prob.nii.gz").exists());
    let report = tmp.path().join("r.json");
    assert_eq!(run(&["evaluate", "--pred", p(&preds), "--gt", p(&raw), "--report", p(&report)]), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["case_count"], 2);
    assert!(r["unpaired"].as_array().is_none_or(Vec::is_empty));
}

#[test]
fn split_sizes_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let list = tmp.path().join("ids.txt");
    fs::write(&list, (0..100).map(|i| format!("patient_{i:03}\n")).collect::<String>()).unwrap();
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    assert_eq!(run(&["--seed", "11", "split", "--cases", p(&list), "--out", p(&a)]), 0);
    assert_eq!(run(&["--seed", "11", "split", "--cases", p(&list), "--out", p(&b)]), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let s: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let sizes: Vec<usize> = ["train", "evaluation", "test"].iter().map(|k| s[k].as_array().unwrap().len()).collect();
    assert_eq!(sizes, [78, 12, 10]);
    assert_eq!(run(&["split", "--cases", p(&list), "--out", p(&a), "--fractions", "0.5,0.5,0.5"]), EXIT_USAGE);
}

#[test]
fn predictor_failure_exit_code() {
    let (tmp, _raw, pre) = dataset(1, "12");
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({"augmentations": [{"kind": "identity"}], "coefficients": {"n": 1, "omegas": [1]},
               "predictor": {"mode": "subprocess", "command": "echo boom >&2; false {ct} {pet} {out}", "timeout_seconds": 10}}),
    );
    let out = tmp.path().join("m.nii.gz");
    assert_eq!(run(&["--config", p(&cfg), "tta", "--case", p(&pre.join("case_000")), "--out", p(&out)]), EXIT_PREDICTOR);
}

#[test]
fn subprocess_predictor_drives_tta() {
    let (tmp, _raw, pre) = dataset(1, "13");
    // copies scaled PET as the probability map
    let cfg = write_config(
        tmp.path(),
        "c.json",
        json!({"augmentations": flip3(), "coefficients": {"n": 3, "omegas": [1, 1, 1]},
               "predictor": {"mode": "subprocess", "command": "test -f {ct} && cp {pet} {out}", "timeout_seconds": 30}}),
    );
    let case = pre.join("case_000");
    let out = tmp.path().join("m.nii.gz");
    assert_eq!(run(&["--config", p(&cfg), "tta", "--case", p(&case), "--out", p(&out)]), 0);
    let pet = read_nifti(case.join("pet.nii.gz")).unwrap();
    let mask = read_mask(&out).unwrap();
    let rec: Value = serde_json::from_str(&fs::read_to_string(case.join("bbox.json")).unwrap()).unwrap();
    let lo: [usize; 3] = serde_json::from_value(rec["lo"].clone()).unwrap();
    let [nx, ny, nz] = pet.dims();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                assert_eq!(mask.get(x + lo[0], y + lo[1], z + lo[2]), pet.get(x, y, z) >= 0.5);
            }
        }
    }
}

#[test]
fn config_errors_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", json!({"theta": 0.5, "colour": "blue"}));
    let list = tmp.path().join("ids.txt");
    fs::write(&list, "a\nb\n").unwrap();
    let out = tmp.path().join("s.json");
    assert_eq!(run(&["--config", p(&cfg), "split", "--cases", p(&list), "--out", p(&out)]), EXIT_USAGE);
    assert_eq!(run(&["--config", p(&tmp.path().join("missing.json")), "split", "--cases", p(&list), "--out", p(&out)]), EXIT_USAGE);
    let cfg = write_config(tmp.path(), "t.json", json!({"theta": 1.5}));
    assert_eq!(run(&["--config", p(&cfg), "split", "--cases", p(&list), "--out", p(&out)]), EXIT_USAGE);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ttafuse");
    let status = Command::new(bin).arg("split").status().unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&status.stdout).contains("optimize"));
}
