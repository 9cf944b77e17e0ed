//! The JSON document that drives every command.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use ttafuse_core::augment::AugmentationSet;
use ttafuse_core::coeffopt::{AscentOptions, Method, OptimizeOptions};
use ttafuse_core::fusion::{check_theta, CoefficientVector, DEFAULT_THETA};
use ttafuse_core::metrics::Connectivity;
use ttafuse_core::predictor::PredictorBinding;
use ttafuse_core::preprocess::{PreprocessConfig, ScaleWindow};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub method: Method,
    pub floor: f64,
    pub grid_step: f64,
    pub ascent: AscentOptions,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let o = OptimizeOptions::default();
        OptimizerSettings { method: Method::Ascent, floor: o.floor, grid_step: o.grid_step, ascent: o.ascent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub ct_window: ScaleWindow,
    pub pet_window: ScaleWindow,
    /// Threshold on the scaled CT; omitted means just above the CT floor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_threshold: Option<f64>,
    pub crop_margin: usize,
    pub augmentations: AugmentationSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<CoefficientVector>,
    pub predictor: PredictorBinding,
    pub theta: f64,
    pub connectivity: Connectivity,
    pub seed: u64,
    pub optimizer: OptimizerSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let pp = PreprocessConfig::default();
        PipelineConfig {
            ct_window: pp.ct_window,
            pet_window: pp.pet_window,
            crop_threshold: pp.crop_threshold,
            crop_margin: pp.crop_margin,
            augmentations: AugmentationSet::default(),
            coefficients: None,
            predictor: PredictorBinding::default(),
            theta: DEFAULT_THETA,
            connectivity: Connectivity::default(),
            seed: 0,
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(w) = &self.coefficients {
            if w.len() != self.augmentations.len() {
                bail!(UsageError(format!(
                    "{} coefficients for {} augmentations",
                    w.len(),
                    self.augmentations.len()
                )));
            }
        }
        self.preprocess().validate()?;
        self.predictor.validate()?;
        check_theta(self.theta)?;
        Ok(())
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            ct_window: self.ct_window,
            pet_window: self.pet_window,
            crop_threshold: self.crop_threshold,
            crop_margin: self.crop_margin,
        }
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        OptimizeOptions {
            theta: self.theta,
            floor: self.optimizer.floor,
            grid_step: self.optimizer.grid_step,
            ascent: self.optimizer.ascent,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
