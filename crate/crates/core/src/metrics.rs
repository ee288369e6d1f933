//! ROC and PR areas, FROC curves and their summaries.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, BBox2D, BreastKey, DetBox, ImageKey, Modality, Target};

/// Minimum center-distance radius for a detection to count.
pub const MIN_MATCH_RADIUS_PX: f64 = 100.0;
/// Slice tolerance as a fraction of the volume depth.
pub const SLICE_TOLERANCE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub unit_id: String,
    pub score: f64,
    pub label: bool,
}

impl ScoredCase {
    pub fn new(unit_id: impl Into<String>, score: f64, label: bool) -> Self {
        ScoredCase {
            unit_id: unit_id.into(),
            score,
            label,
        }
    }
}

fn class_counts(cases: &[ScoredCase]) -> Result<(u64, u64)> {
    if let Some(c) = cases.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score for unit {}", c.unit_id)));
    }
    let pos = cases.iter().filter(|c| c.label).count() as u64;
    Ok((pos, cases.len() as u64 - pos))
}

/// Cases sorted by descending score, grouped by equal score, as
/// `(positives, negatives)` per group.
fn threshold_groups(cases: &[ScoredCase]) -> Vec<(u64, u64)> {
    let mut order: Vec<&ScoredCase> = cases.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for c in order {
        if last != Some(c.score) {
            groups.push((0, 0));
            last = Some(c.score);
        }
        let g = groups.last_mut().expect("group pushed");
        if c.label {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Trapezoidal area under the ROC curve with tied scores forming one step.
pub fn auroc(cases: &[ScoredCase]) -> Result<f64> {
    let (p, n) = class_counts(cases)?;
    if p == 0 || n == 0 {
        return Err(Error::Undefined(format!(
            "AUROC needs both classes, got {p} positive and {n} negative"
        )));
    }
    // Doubled area scaled by P*N is an exact integer.
    let mut twice: u128 = 0;
    let mut tp_before: u128 = 0;
    for (pos, neg) in threshold_groups(cases) {
        twice += neg as u128 * (2 * tp_before + pos as u128);
        tp_before += pos as u128;
    }
    Ok(twice as f64 / (2.0 * p as f64 * n as f64))
}

/// Trapezoidal area under the precision-recall curve.
pub fn auprc(cases: &[ScoredCase]) -> Result<f64> {
    let (p, _) = class_counts(cases)?;
    if p == 0 {
        return Err(Error::Undefined("AUPRC needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev: Option<(f64, f64)> = None;
    let mut area = 0.0;
    for (pos, neg) in threshold_groups(cases) {
        tp += pos;
        fp += neg;
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        let (r0, p0) = prev.unwrap_or((0.0, precision));
        area += (recall - r0) * (precision + p0) / 2.0;
        prev = Some((recall, precision));
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub geom: BBox2D,
    pub slice: Option<u32>,
    pub lesion_id: String,
    pub image: ImageKey,
}

/// Whether a prediction localizes a ground-truth lesion.
pub fn match_tp(pred: &DetBox, gt: &GroundTruthBox, n_slices: Option<u32>) -> Result<bool> {
    let radius = (gt.geom.diagonal() / 2.0).max(MIN_MATCH_RADIUS_PX);
    let close = center_distance(&pred.geom, &gt.geom) < radius;
    if gt.image.modality != Modality::Dbt {
        return Ok(close);
    }
    match (pred.slice, gt.slice, n_slices) {
        (Some(ps), Some(gs), Some(n)) => {
            let gap = (ps as f64 - gs as f64).abs();
            Ok(close && gap <= SLICE_TOLERANCE_FRACTION * n as f64)
        }
        _ => Err(Error::invalid(format!(
            "DBT image {} needs prediction slice, ground-truth slice and slice count",
            gt.image.image_id
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrocLevel {
    Lesion,
    Breast,
}

/// One evaluated image and its box predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub key: ImageKey,
    pub n_slices: Option<u32>,
    pub predictions: Vec<DetBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    /// Score threshold (inclusive); `None` for the origin point.
    pub threshold: Option<f64>,
    pub fp_per_image: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_images: usize,
    pub level: FrocLevel,
}

#[derive(Debug, Clone, PartialEq)]
struct LabeledDetection {
    score: f64,
    image: usize,
    tp: bool,
    lesions: Vec<usize>,
}

/// Detections with their match outcomes resolved once, so curves can be
/// rebuilt cheaply under rescoring or unit swaps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocData {
    images: Vec<ImageKey>,
    image_breast: Vec<usize>,
    n_breasts: usize,
    n_lesions: usize,
    lesion_breast: Vec<usize>,
    positive_breasts: Vec<bool>,
    detections: Vec<LabeledDetection>,
}

/// Unit whose box sets are exchanged during paired resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrocUnit {
    Image,
    Breast,
}

impl From<FrocLevel> for FrocUnit {
    fn from(level: FrocLevel) -> Self {
        match level {
            FrocLevel::Lesion => FrocUnit::Image,
            FrocLevel::Breast => FrocUnit::Breast,
        }
    }
}

impl FrocData {
    /// Resolve every prediction against the ground truth of its image.
    pub fn build(images: &[EvalImage], gts: &[GroundTruthBox]) -> Result<FrocData> {
        let mut image_index: HashMap<&ImageKey, usize> = HashMap::new();
        for (i, im) in images.iter().enumerate() {
            if image_index.insert(&im.key, i).is_some() {
                return Err(Error::invalid(format!("image {} listed twice", im.key.image_id)));
            }
        }
        let mut breast_index: BTreeMap<BreastKey, usize> = BTreeMap::new();
        let image_breast: Vec<usize> = images
            .iter()
            .map(|im| {
                let n = breast_index.len();
                *breast_index.entry(im.key.breast()).or_insert(n)
            })
            .collect();

        let mut lesion_index: BTreeMap<(BreastKey, &str), usize> = BTreeMap::new();
        let mut lesion_breast = Vec::new();
        let mut positive_breasts = vec![false; breast_index.len()];
        let mut gts_by_image: Vec<Vec<(usize, &GroundTruthBox)>> = vec![Vec::new(); images.len()];
        for gt in gts {
            gt.geom.validate()?;
            let &img = image_index.get(&gt.image).ok_or_else(|| {
                Error::invalid(format!(
                    "ground truth for image {} which has no prediction entry",
                    gt.image.image_id
                ))
            })?;
            let breast = image_breast[img];
            positive_breasts[breast] = true;
            let n = lesion_index.len();
            let lesion = *lesion_index
                .entry((gt.image.breast(), gt.lesion_id.as_str()))
                .or_insert(n);
            if lesion == lesion_breast.len() {
                lesion_breast.push(breast);
            }
            gts_by_image[img].push((lesion, gt));
        }

        let mut detections = Vec::new();
        for (i, im) in images.iter().enumerate() {
            for p in &im.predictions {
                p.validate()?;
                let mut lesions = Vec::new();
                for &(lesion, gt) in &gts_by_image[i] {
                    if match_tp(p, gt, im.n_slices)? {
                        lesions.push(lesion);
                    }
                }
                lesions.sort_unstable();
                lesions.dedup();
                detections.push(LabeledDetection {
                    score: p.score(Target::Malignant),
                    image: i,
                    tp: !lesions.is_empty(),
                    lesions,
                });
            }
        }
        Ok(FrocData {
            images: images.iter().map(|im| im.key.clone()).collect(),
            image_breast,
            n_breasts: breast_index.len(),
            n_lesions: lesion_breast.len(),
            lesion_breast,
            positive_breasts,
            detections,
        })
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_units(&self, unit: FrocUnit) -> usize {
        match unit {
            FrocUnit::Image => self.images.len(),
            FrocUnit::Breast => self.n_breasts,
        }
    }

    fn unit_of(&self, image: usize, unit: FrocUnit) -> usize {
        match unit {
            FrocUnit::Image => image,
            FrocUnit::Breast => self.image_breast[image],
        }
    }

    /// Highest detection score per unit; `None` for units without boxes.
    pub fn unit_top1(&self, unit: FrocUnit) -> Vec<Option<f64>> {
        let mut top = vec![None; self.n_units(unit)];
        for d in &self.detections {
            let slot: &mut Option<f64> = &mut top[self.unit_of(d.image, unit)];
            *slot = Some(slot.map_or(d.score, |s: f64| s.max(d.score)));
        }
        top
    }

    /// Same detections with every score passed through `f`.
    pub fn rescored(&self, f: impl Fn(f64) -> f64) -> FrocData {
        let mut out = self.clone();
        for d in &mut out.detections {
            d.score = f(d.score);
        }
        out
    }

    /// Box sets taken from `other` for units flagged in `take_other`, from
    /// `self` elsewhere. Both must describe the same images and lesions.
    pub fn mixed(&self, other: &FrocData, unit: FrocUnit, take_other: &[bool]) -> Result<FrocData> {
        self.check_compatible(other)?;
        if take_other.len() != self.n_units(unit) {
            return Err(Error::shape(format!(
                "{} swap flags for {} units",
                take_other.len(),
                self.n_units(unit)
            )));
        }
        let mut out = self.clone();
        out.detections = self
            .detections
            .iter()
            .filter(|d| !take_other[self.unit_of(d.image, unit)])
            .chain(
                other
                    .detections
                    .iter()
                    .filter(|d| take_other[self.unit_of(d.image, unit)]),
            )
            .cloned()
            .collect();
        Ok(out)
    }

    pub fn check_compatible(&self, other: &FrocData) -> Result<()> {
        if self.images != other.images {
            let only_a: Vec<String> = self
                .images
                .iter()
                .filter(|k| !other.images.contains(k))
                .map(|k| k.image_id.clone())
                .collect();
            let only_b: Vec<String> = other
                .images
                .iter()
                .filter(|k| !self.images.contains(k))
                .map(|k| k.image_id.clone())
                .collect();
            return Err(Error::UnitMismatch { only_a, only_b });
        }
        if self.lesion_breast != other.lesion_breast {
            return Err(Error::invalid("models were evaluated against different ground truth"));
        }
        Ok(())
    }

    pub fn curve(&self, level: FrocLevel) -> Result<FrocCurve> {
        let denom = match level {
            FrocLevel::Lesion => self.n_lesions,
            FrocLevel::Breast => self.positive_breasts.iter().filter(|&&p| p).count(),
        };
        if denom == 0 {
            return Err(Error::Undefined(format!("no ground truth for {level:?}-level FROC")));
        }
        if self.images.is_empty() {
            return Err(Error::Undefined("FROC over zero images".into()));
        }
        let mut order: Vec<&LabeledDetection> = self.detections.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));

        let n_images = self.images.len() as f64;
        let mut hit_lesion = vec![false; self.n_lesions];
        let mut hit_breast = vec![false; self.n_breasts];
        let (mut hits, mut fp) = (0usize, 0usize);
        let mut points = vec![FrocPoint {
            threshold: None,
            fp_per_image: 0.0,
            sensitivity: 0.0,
        }];
        let mut i = 0;
        while i < order.len() {
            let t = order[i].score;
            while i < order.len() && order[i].score == t {
                let d = order[i];
                if !d.tp {
                    fp += 1;
                }
                for &l in &d.lesions {
                    match level {
                        FrocLevel::Lesion if !hit_lesion[l] => {
                            hit_lesion[l] = true;
                            hits += 1;
                        }
                        FrocLevel::Breast if !hit_breast[self.lesion_breast[l]] => {
                            hit_breast[self.lesion_breast[l]] = true;
                            hits += 1;
                        }
                        _ => {}
                    }
                }
                i += 1;
            }
            points.push(FrocPoint {
                threshold: Some(t),
                fp_per_image: fp as f64 / n_images,
                sensitivity: hits as f64 / denom as f64,
            });
        }
        Ok(FrocCurve {
            points,
            n_images: self.images.len(),
            level,
        })
    }
}

/// FROC curve with one point per distinct prediction score.
pub fn froc(images: &[EvalImage], gts: &[GroundTruthBox], level: FrocLevel) -> Result<FrocCurve> {
    FrocData::build(images, gts)?.curve(level)
}

/// Area under the step curve between 0 and 1 false positives per image.
pub fn aufroc1(curve: &FrocCurve) -> f64 {
    let pts = &curve.points;
    let mut area = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let start = p.fp_per_image.min(1.0);
        let end = pts.get(i + 1).map_or(1.0, |q| q.fp_per_image.min(1.0));
        area += p.sensitivity * (end - start);
    }
    area
}

/// Sensitivity of the last point at or below the requested FP rate.
pub fn sensitivity_at_fp(curve: &FrocCurve, fp_per_image: f64) -> f64 {
    let idx = curve.points.partition_point(|p| p.fp_per_image <= fp_per_image);
    if idx == 0 {
        0.0
    } else {
        curve.points[idx - 1].sensitivity
    }
}
