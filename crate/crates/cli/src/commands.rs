//! One function per subcommand. Each is a thin shell over the library.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;
use ttafuse_core::coeffopt::{optimize, Method, ValidationCase};
use ttafuse_core::fusion::tta_predict_detailed;
use ttafuse_core::io::{read_mask, write_mask, write_nifti};
use ttafuse_core::metrics::{evaluate, Connectivity, EvalReport};
use ttafuse_core::phantom::{generate_case, write_case_nifti, PhantomParams};
use ttafuse_core::preprocess::{crop_mask, uncrop_mask, uncrop_volume};
use ttafuse_core::split::{split_cases, SplitSpec};

use crate::cases::{self, CropRecord, BBOX_FILE};
use crate::config::PipelineConfig;
use crate::{Command, DataError, UsageError};

pub fn dispatch(config: &PipelineConfig, command: Command) -> anyhow::Result<()> {
    match command {
        Command::Preprocess { in_dir, out_dir } => cmd_preprocess(config, &in_dir, &out_dir),
        Command::Tta { case_dir, out_path, theta } => {
            let mut config = config.clone();
            if let Some(t) = theta {
                config.theta = t;
                config.validate()?;
            }
            cmd_tta(&config, &case_dir, &out_path)
        }
        Command::Optimize { val_dir, out_path, method } => {
            cmd_optimize(config, &val_dir, &out_path, method.unwrap_or(config.optimizer.method))
        }
        Command::Evaluate { pred_dir, gt_dir, report_path, connectivity } => {
            cmd_evaluate(&pred_dir, &gt_dir, &report_path, connectivity.unwrap_or(config.connectivity))
        }
        Command::Split { case_list, out_path, fractions } => {
            let mut spec = SplitSpec { seed: config.seed, ..Default::default() };
            if let Some(f) = fractions {
                spec.fractions = f;
            }
            cmd_split(&case_list, &spec, &out_path)
        }
        Command::Synth { out_dir, n_cases, dims, lesions } => {
            let params = PhantomParams {
                dims,
                n_lesions: (lesions[0], lesions[1]),
                ..Default::default()
            };
            cmd_synth(&out_dir, n_cases, &params, config.seed)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_preprocess(config: &PipelineConfig, in_dir: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let pp = config.preprocess();
    let dirs = cases::case_dirs(in_dir)?;
    if dirs.is_empty() {
        bail!(DataError(format!("no case folders in {}", in_dir.display())));
    }
    let results: Vec<(String, anyhow::Result<()>)> = dirs
        .par_iter()
        .map(|(name, dir)| {
            let r = (|| {
                let ct = cases::load_modality(dir, "ct")?;
                let pet = cases::load_modality(dir, "pet")?;
                let seg = cases::load_seg(dir)?;
                let prepared = pp.apply(&ct, &pet)?;
                let out = out_dir.join(name);
                fs::create_dir_all(&out)?;
                write_nifti(&prepared.ct, out.join("ct.nii.gz"))?;
                write_nifti(&prepared.pet, out.join("pet.nii.gz"))?;
                if let Some(seg) = seg {
                    write_mask(&crop_mask(&seg, &prepared.bbox)?, out.join("seg.nii.gz"))?;
                }
                let rec = CropRecord { lo: prepared.bbox.lo, hi: prepared.bbox.hi, full_dims: prepared.full_dims };
                write_json(&out.join(BBOX_FILE), &rec)
            })();
            (name.clone(), r)
        })
        .collect();
    let mut failed = Vec::new();
    for (name, r) in results {
        if let Err(e) = r {
            eprintln!("{name}: {e:#}");
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        bail!(DataError(format!("preprocessing failed for {}", failed.join(", "))));
    }
    println!("preprocessed {} cases into {}", dirs.len(), out_dir.display());
    Ok(())
}

/// `<dir>/<stem>_prob.nii.gz` for an output mask path `<dir>/<stem>.nii[.gz]`.
pub fn prob_path(mask_path: &Path) -> PathBuf {
    let name = mask_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = cases::nifti_stem(&name).unwrap_or(&name);
    mask_path.with_file_name(format!("{stem}_prob.nii.gz"))
}

pub fn cmd_tta(config: &PipelineConfig, case_dir: &Path, out_path: &Path) -> anyhow::Result<()> {
    let Some(w) = &config.coefficients else {
        bail!(UsageError("config has no coefficients; run `optimize` first or set them".into()));
    };
    let ct = cases::load_modality(case_dir, "ct")?;
    let pet = cases::load_modality(case_dir, "pet")?;
    let crop = cases::load_crop(case_dir)?;
    let predictor = config.predictor.build()?;
    let case_id = cases::case_name(case_dir);
    let out = tta_predict_detailed(predictor.as_ref(), &case_id, &ct, &pet, &config.augmentations, w, config.theta)?;
    let (mask, prob) = match crop {
        Some(rec) => (
            uncrop_mask(&out.mask, &rec.bbox(), rec.full_dims)?,
            uncrop_volume(&out.prob, &rec.bbox(), rec.full_dims)?,
        ),
        None => (out.mask, out.prob),
    };
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_mask(&mask, out_path)?;
    write_nifti(&prob, prob_path(out_path))?;
    println!("{case_id}: {} foreground voxels -> {}", mask.count(), out_path.display());
    Ok(())
}

/// `<dir>/<stem>.report.json` next to the coefficient file.
pub fn report_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("report.json")
}

pub fn cmd_optimize(config: &PipelineConfig, val_dir: &Path, out_path: &Path, method: Method) -> anyhow::Result<()> {
    let dirs = cases::case_dirs(val_dir)?;
    if dirs.is_empty() {
        bail!(UsageError(format!("no validation cases in {}", val_dir.display())));
    }
    let cases = dirs
        .par_iter()
        .map(|(name, dir)| {
            let Some(gt) = cases::load_seg(dir)? else {
                bail!(UsageError(format!("no ground truth (seg.nii[.gz]) for validation case {name}")));
            };
            let ct = cases::load_modality(dir, "ct")?;
            let pet = cases::load_modality(dir, "pet")?;
            Ok(ValidationCase::new(name.clone(), ct, pet, gt)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let predictor = config.predictor.build()?;
    let report = optimize(predictor.as_ref(), &cases, &config.augmentations, method, &config.optimize_options())?;
    write_json(out_path, &report.coefficients)?;
    write_json(&report_path(out_path), &report)?;
    println!(
        "{method:?} on {} cases: mean Dice {:.4} (uniform {:.4}) -> {}",
        cases.len(),
        report.objective,
        report.uniform_objective,
        out_path.display()
    );
    Ok(())
}

pub fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, report_path: &Path, connectivity: Connectivity) -> anyhow::Result<()> {
    let preds = cases::mask_entries(pred_dir)?;
    let gts = cases::mask_entries(gt_dir)?;
    let paired: Vec<(&String, &PathBuf, &PathBuf)> =
        gts.iter().filter_map(|(id, g)| preds.get(id).map(|p| (id, p, g))).collect();
    let unpaired: Vec<String> = gts
        .keys()
        .filter(|id| !preds.contains_key(*id))
        .chain(preds.keys().filter(|id| !gts.contains_key(*id)))
        .cloned()
        .collect();
    let masks = paired
        .par_iter()
        .map(|(id, p, g)| {
            let pm = read_mask(p).with_context(|| format!("reading {}", p.display()))?;
            let gm = read_mask(g).with_context(|| format!("reading {}", g.display()))?;
            Ok(((*id).clone(), pm, gm))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut report: EvalReport = evaluate(masks.iter().map(|(id, p, g)| (id.as_str(), p, g)), connectivity)?;
    report.unpaired = unpaired.clone();
    report.write(report_path).with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "{} cases: mean Dice {:.4}, FP {:.3} mL, FN {:.3} mL",
        report.case_count, report.mean_dice, report.mean_fp_volume_ml, report.mean_fn_volume_ml
    );
    if !unpaired.is_empty() {
        bail!(DataError(format!("unpaired cases: {}", unpaired.join(", "))));
    }
    if report.case_count == 0 {
        bail!(DataError("no cases to evaluate".into()));
    }
    Ok(())
}

fn read_case_list(path: &Path) -> anyhow::Result<Vec<String>> {
    if path.is_dir() {
        return Ok(cases::case_dirs(path)?.into_iter().map(|(n, _)| n).collect());
    }
    let text = fs::read_to_string(path).map_err(|e| DataError(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn cmd_split(case_list: &Path, spec: &SplitSpec, out_path: &Path) -> anyhow::Result<()> {
    let ids = read_case_list(case_list)?;
    if ids.is_empty() {
        bail!(UsageError(format!("case list {} is empty", case_list.display())));
    }
    let split = split_cases(&ids, spec)?;
    write_json(out_path, &split)?;
    let [a, b, c] = split.sizes();
    println!("train {a}, evaluation {b}, test {c} -> {}", out_path.display());
    Ok(())
}

pub fn cmd_synth(out_dir: &Path, n_cases: usize, params: &PhantomParams, seed: u64) -> anyhow::Result<()> {
    params.validate()?;
    fs::create_dir_all(out_dir)?;
    (0..n_cases).into_par_iter().try_for_each(|i| -> anyhow::Result<()> {
        let case = generate_case(params, seed, i)?;
        write_case_nifti(&case, out_dir)?;
        Ok(())
    })?;
    println!("wrote {n_cases} phantom cases to {}", out_dir.display());
    Ok(())
}
