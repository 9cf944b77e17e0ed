//! Challenge-style segmentation scores: Dice, false-positive volume and
//! false-negative volume, per case and aggregated.
//!
//! False positives and negatives are counted per connected component: a
//! predicted component that touches no ground-truth voxel contributes its
//! whole volume to the FP volume, and a ground-truth lesion that no
//! predicted voxel touches contributes its volume to the FN volume.

mod components;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use components::{connected_components, Connectivity, Labels};

use crate::error::{param, Result};
use crate::volume::MaskVolume;

fn check_geometry(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if !a.geometry().matches(b.geometry()) {
        return param(format!(
            "mask geometries differ: {:?} vs {:?}",
            a.geometry(),
            b.geometry()
        ));
    }
    Ok(())
}

/// `2|P ∧ G| / (|P| + |G|)`, with 1.0 when both masks are empty.
pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    check_geometry(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a & b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok(dice_from_counts(inter, p, g))
}

#[inline]
pub fn dice_from_counts(intersection: usize, pred: usize, gt: usize) -> f64 {
    if pred + gt == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred + gt) as f64
    }
}

/// Total volume (mL) of components of `a` that share no voxel with `b`.
fn untouched_component_volume(a: &MaskVolume, b: &MaskVolume, connectivity: Connectivity) -> Result<f64> {
    check_geometry(a, b)?;
    let labels = connected_components(a, connectivity);
    let mut touched = vec![false; labels.count + 1];
    for (&l, &v) in labels.labels.iter().zip(b.data()) {
        if v != 0 {
            touched[l as usize] = true;
        }
    }
    let voxels: usize = labels
        .sizes()
        .iter()
        .enumerate()
        .filter(|(i, _)| !touched[i + 1])
        .map(|(_, s)| s)
        .sum();
    Ok(voxels as f64 * a.geometry().voxel_volume_ml())
}

/// Volume (mL) of predicted components with no ground-truth overlap.
pub fn fp_volume(pred: &MaskVolume, gt: &MaskVolume, connectivity: Connectivity) -> Result<f64> {
    untouched_component_volume(pred, gt, connectivity)
}

/// Volume (mL) of ground-truth components the prediction misses entirely.
pub fn fn_volume(pred: &MaskVolume, gt: &MaskVolume, connectivity: Connectivity) -> Result<f64> {
    untouched_component_volume(gt, pred, connectivity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dice: f64,
    pub fp_volume_ml: f64,
    pub fn_volume_ml: f64,
}

pub fn score_case(case_id: &str, pred: &MaskVolume, gt: &MaskVolume, connectivity: Connectivity) -> Result<CaseScore> {
    Ok(CaseScore {
        case_id: case_id.to_string(),
        dice: dice(pred, gt)?,
        fp_volume_ml: fp_volume(pred, gt, connectivity)?,
        fn_volume_ml: fn_volume(pred, gt, connectivity)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_case: Vec<CaseScore>,
    pub mean_dice: f64,
    pub mean_fp_volume_ml: f64,
    pub mean_fn_volume_ml: f64,
    pub case_count: usize,
    /// Cases present on only one side of a directory comparison.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unpaired: Vec<String>,
}

impl EvalReport {
    /// Aggregates per-case scores; an empty list yields zero means.
    pub fn from_scores(per_case: Vec<CaseScore>) -> Self {
        let n = per_case.len();
        let mean = |f: fn(&CaseScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_case.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalReport {
            mean_dice: mean(|c| c.dice),
            mean_fp_volume_ml: mean(|c| c.fp_volume_ml),
            mean_fn_volume_ml: mean(|c| c.fn_volume_ml),
            case_count: n,
            per_case,
            unpaired: Vec::new(),
        }
    }

    /// One row per case followed by a `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| crate::Error::Io(std::io::Error::other(e));
        w.write_record(["case_id", "dice", "fp_volume_ml", "fn_volume_ml"]).map_err(io)?;
        for c in &self.per_case {
            w.write_record([
                c.case_id.clone(),
                c.dice.to_string(),
                c.fp_volume_ml.to_string(),
                c.fn_volume_ml.to_string(),
            ])
            .map_err(io)?;
        }
        w.write_record([
            "mean".to_string(),
            self.mean_dice.to_string(),
            self.mean_fp_volume_ml.to_string(),
            self.mean_fn_volume_ml.to_string(),
        ])
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<path>` as JSON and the same report as CSV next to it.
    pub fn write(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        fs::write(json_path.with_extension("csv"), self.to_csv()?)?;
        Ok(())
    }
}

/// Scores every `(case_id, pred, gt)` triple.
pub fn evaluate<'a, I>(pairs: I, connectivity: Connectivity) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a str, &'a MaskVolume, &'a MaskVolume)>,
{
    let mut scores = Vec::new();
    for (case_id, pred, gt) in pairs {
        if !pred.geometry().matches(gt.geometry()) {
            return param(format!("case {case_id}: prediction and ground-truth geometry differ"));
        }
        scores.push(score_case(case_id, pred, gt, connectivity)?);
    }
    Ok(EvalReport::from_scores(scores))
}
