//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Modality;
use crate::metrics::FrocLevel;
use crate::stats::ClassMetric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Planar NMS threshold for single-image aggregation and top-K.
    pub nms_iou: f64,
    pub multimodal_iou: f64,
    pub triplet_iou: f64,
    pub top_k: usize,
    pub include_global_pool: bool,
    pub metric: ClassMetric,
    pub level: FrocLevel,
    pub bootstrap_resamples: usize,
    pub permutation_iters: usize,
    pub ensemble_size: usize,
    pub alternation: Vec<Modality>,
    pub margin_percentiles: f64,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub predictions: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub gt_boxes: Option<PathBuf>,
    pub timeline: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: crate::rng::DEFAULT_SEED,
            nms_iou: 0.5,
            multimodal_iou: crate::detect::MULTIMODAL_IOU,
            triplet_iou: crate::detect::TRIPLET_IOU_THRESHOLD,
            top_k: 7,
            include_global_pool: false,
            metric: ClassMetric::Auroc,
            level: FrocLevel::Lesion,
            bootstrap_resamples: crate::stats::DEFAULT_BOOTSTRAP_RESAMPLES,
            permutation_iters: crate::stats::DEFAULT_PERMUTATION_ITERS,
            ensemble_size: crate::ensemble::DEFAULT_ENSEMBLE_SIZE,
            alternation: crate::ensemble::DEFAULT_ALTERNATION.to_vec(),
            margin_percentiles: 1.0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("multimodal_iou", self.multimodal_iou),
            ("triplet_iou", self.triplet_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.bootstrap_resamples == 0 || self.permutation_iters == 0 {
            return Err(Error::Config("resampling counts must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.margin_percentiles) {
            return Err(Error::Config(format!(
                "margin_percentiles = {} outside [0, 100]",
                self.margin_percentiles
            )));
        }
        self.alternation_order()?;
        Ok(())
    }

    pub fn alternation_order(&self) -> Result<[Modality; 3]> {
        let order: [Modality; 3] = self
            .alternation
            .clone()
            .try_into()
            .map_err(|_| Error::Config("alternation must list exactly three modalities".into()))?;
        if Modality::ALL.iter().any(|m| !order.contains(m)) {
            return Err(Error::Config(
                "alternation must name FFDM, CVIEW and DBT once each".into(),
            ));
        }
        Ok(order)
    }
}
