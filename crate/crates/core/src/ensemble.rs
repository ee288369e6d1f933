//! Breast-level aggregation, greedy ensemble selection, operating points
//! and triage.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BreastKey, Laterality, Modality};
use crate::head::ImagePrediction;
use crate::metrics::{auroc, ScoredCase};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 12;
pub const DEFAULT_ALTERNATION: [Modality; 3] = [Modality::Ffdm, Modality::Cview, Modality::Dbt];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelId {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelId {
    pub fn new(id: impl Into<String>, modality: Modality) -> Self {
        ModelId {
            id: id.into(),
            modality,
            fold: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreastScore {
    pub exam_id: String,
    pub laterality: Laterality,
    pub model_id: String,
    pub score_malignant: f64,
    pub score_benign: f64,
}

impl BreastScore {
    pub fn breast(&self) -> BreastKey {
        BreastKey {
            exam_id: self.exam_id.clone(),
            laterality: self.laterality,
        }
    }
}

/// Mean per target over every image prediction of one breast, including
/// test-time augmentation repeats.
pub fn breast_score(breast: &BreastKey, model_id: &str, image_preds: &[ImagePrediction]) -> Result<BreastScore> {
    if image_preds.is_empty() {
        return Err(Error::invalid(format!("no image predictions for breast {breast}")));
    }
    let n = image_preds.len() as f64;
    Ok(BreastScore {
        exam_id: breast.exam_id.clone(),
        laterality: breast.laterality,
        model_id: model_id.to_string(),
        score_malignant: image_preds.iter().map(|p| p.y_malignant).sum::<f64>() / n,
        score_benign: image_preds.iter().map(|p| p.y_benign).sum::<f64>() / n,
    })
}

/// Multiset of model ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub counts: BTreeMap<String, u32>,
}

impl Selection {
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        for id in ids {
            *counts.entry(id.into()).or_insert(0) += 1;
        }
        Selection { counts }
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }
}

/// Multiplicity-weighted mean over the selected models that scored this
/// breast; models of an absent modality drop out and the weights
/// renormalize.
pub fn modality_ensemble(scores: &BTreeMap<String, f64>, selection: &Selection) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0u32);
    for (id, &w) in &selection.counts {
        if let Some(&s) = scores.get(id) {
            num += w as f64 * s;
            den += w;
        }
    }
    if den == 0 {
        return Err(Error::Undefined("no selected model scored this breast".into()));
    }
    Ok(num / den as f64)
}

/// Ensemble score for every breast present in `scores`.
pub fn ensemble_breasts(scores: &[BreastScore], selection: &Selection) -> Result<Vec<(BreastKey, f64)>> {
    let mut per_breast: BTreeMap<BreastKey, BTreeMap<String, f64>> = BTreeMap::new();
    for s in scores {
        per_breast
            .entry(s.breast())
            .or_default()
            .insert(s.model_id.clone(), s.score_malignant);
    }
    per_breast
        .into_iter()
        .map(|(k, m)| {
            modality_ensemble(&m, selection)
                .map(|v| (k.clone(), v))
                .map_err(|_| Error::Undefined(format!("no selected model scored breast {k}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedySelection {
    /// Accepted model ids in step order.
    pub picks: Vec<String>,
    pub selection: Selection,
    /// Selection-set AUROC after each step.
    pub trajectory: Vec<f64>,
}

/// Forward selection with replacement maximizing breast-level malignant
/// AUROC. With `alternation`, step `t` only considers models of modality
/// `alternation[t % 3]`.
pub fn greedy_select(
    candidates: &[(ModelId, Vec<BreastScore>)],
    labels: &BTreeMap<BreastKey, bool>,
    target_size: usize,
    alternation: Option<[Modality; 3]>,
) -> Result<GreedySelection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate models"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no labelled breasts in the selection set"));
    }
    let breasts: Vec<&BreastKey> = labels.keys().collect();
    let ids: Vec<String> = breasts.iter().map(|b| b.to_string()).collect();
    let label_vec: Vec<bool> = labels.values().copied().collect();

    let mut matrix: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    for (model, scores) in candidates {
        let by_breast: HashMap<BreastKey, f64> = scores.iter().map(|s| (s.breast(), s.score_malignant)).collect();
        let row: Result<Vec<f64>> = breasts
            .iter()
            .map(|b| {
                by_breast
                    .get(*b)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("model {} has no score for breast {b}", model.id)))
            })
            .collect();
        matrix.push(row?);
    }
    if let Some(order) = alternation {
        for m in order {
            if !candidates.iter().any(|(c, _)| c.modality == m) {
                return Err(Error::invalid(format!("alternation needs a {m} candidate")));
            }
        }
    }

    let mut sum = vec![0.0; breasts.len()];
    let mut out = GreedySelection {
        picks: Vec::new(),
        selection: Selection::default(),
        trajectory: Vec::new(),
    };
    for step in 0..target_size {
        let allowed: Vec<usize> = (0..candidates.len())
            .filter(|&i| alternation.is_none_or(|o| candidates[i].0.modality == o[step % 3]))
            .collect();
        let k = (step + 1) as f64;
        let evals: Result<Vec<f64>> = allowed
            .par_iter()
            .map(|&i| {
                let cases: Vec<ScoredCase> = (0..sum.len())
                    .map(|j| ScoredCase::new(ids[j].clone(), (sum[j] + matrix[i][j]) / k, label_vec[j]))
                    .collect();
                auroc(&cases)
            })
            .collect();
        let evals = evals?;
        let mut best = 0;
        for (pos, &v) in evals.iter().enumerate() {
            if v > evals[best] {
                best = pos;
            }
        }
        let chosen = allowed[best];
        for (s, v) in sum.iter_mut().zip(&matrix[chosen]) {
            *s += v;
        }
        let id = candidates[chosen].0.id.clone();
        *out.selection.counts.entry(id.clone()).or_insert(0) += 1;
        out.picks.push(id);
        out.trajectory.push(evals[best]);
    }
    Ok(out)
}

/// Percentile-based score threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Lowest score among positives.
    pub base_threshold: f64,
    /// Percent of all scores strictly below the base threshold.
    pub base_percentile: f64,
    pub final_percentile: f64,
    pub threshold: f64,
}

/// Nearest-rank threshold for percentile `p`: the smallest score such that
/// about `p` percent of scores fall strictly below it. Past the top it is
/// `+inf`, so everything falls below.
pub fn percentile_threshold(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = (p / 100.0 * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if k >= n {
        f64::INFINITY
    } else {
        sorted[k]
    }
}

/// Threshold keeping every positive at or above it, less a safety margin.
pub fn operating_point(scores: &[f64], labels: &[bool], margin_percentiles: f64) -> Result<OperatingPoint> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let base = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .fold(f64::INFINITY, f64::min);
    if base.is_infinite() {
        return Err(Error::Undefined("operating point needs at least one positive".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let below = sorted.partition_point(|&s| s < base);
    let base_percentile = 100.0 * below as f64 / sorted.len() as f64;
    let final_percentile = base_percentile - margin_percentiles;
    Ok(OperatingPoint {
        base_threshold: base,
        base_percentile,
        final_percentile,
        threshold: percentile_threshold(&sorted, final_percentile),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BreastFlag {
    Green,
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TriageCategory {
    AllGreen,
    Mixed,
    AllGray,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageResult {
    pub exam_id: String,
    pub left: BreastFlag,
    pub right: BreastFlag,
    pub category: TriageCategory,
}

pub fn flag(score: f64, threshold: f64) -> BreastFlag {
    if score < threshold {
        BreastFlag::Green
    } else {
        BreastFlag::Gray
    }
}

pub fn triage(exam_id: &str, left_score: f64, right_score: f64, threshold: f64) -> TriageResult {
    let (left, right) = (flag(left_score, threshold), flag(right_score, threshold));
    let category = match (left, right) {
        (BreastFlag::Green, BreastFlag::Green) => TriageCategory::AllGreen,
        (BreastFlag::Gray, BreastFlag::Gray) => TriageCategory::AllGray,
        _ => TriageCategory::Mixed,
    };
    TriageResult {
        exam_id: exam_id.to_string(),
        left,
        right,
        category,
    }
}

pub fn triage_counts(results: &[TriageResult]) -> BTreeMap<TriageCategory, usize> {
    let mut counts: BTreeMap<TriageCategory, usize> =
        [TriageCategory::AllGreen, TriageCategory::Mixed, TriageCategory::AllGray]
            .into_iter()
            .map(|c| (c, 0))
            .collect();
    for r in results {
        *counts.entry(r.category).or_default() += 1;
    }
    counts
}

/// One screening exam in the retrospective analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamOutcome {
    pub exam_id: String,
    pub left: f64,
    pub right: f64,
    pub cancer: bool,
    pub recalled: bool,
}

impl ExamOutcome {
    pub fn score(&self) -> f64 {
        self.left.max(self.right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallSavingsRow {
    pub percentile: f64,
    pub threshold: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
    pub fraction_recalls_saved: Option<f64>,
    pub fraction_workload_saved: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn savings_row(exams: &[ExamOutcome], percentile: f64, threshold: f64) -> RecallSavingsRow {
    let (mut cancers, mut cancers_kept, mut healthy, mut healthy_rejected) = (0, 0, 0, 0);
    let (mut recalled, mut recalled_rejected, mut rejected) = (0, 0, 0);
    for e in exams {
        let below = e.score() < threshold;
        rejected += below as usize;
        if e.cancer {
            cancers += 1;
            cancers_kept += !below as usize;
        } else {
            healthy += 1;
            healthy_rejected += below as usize;
        }
        if e.recalled {
            recalled += 1;
            recalled_rejected += below as usize;
        }
    }
    let sensitivity = ratio(cancers_kept, cancers);
    let specificity = ratio(healthy_rejected, healthy);
    RecallSavingsRow {
        percentile,
        threshold,
        sensitivity,
        specificity,
        fnr: sensitivity.map(|s| 1.0 - s),
        fpr: specificity.map(|s| 1.0 - s),
        fraction_recalls_saved: ratio(recalled_rejected, recalled),
        fraction_workload_saved: rejected as f64 / exams.len().max(1) as f64,
    }
}

/// Sweep of hypothetical rejection thresholds over the exam-score
/// distribution. Exams below the threshold go unreviewed.
pub fn recall_savings_curve(exams: &[ExamOutcome], percentile_grid: &[f64]) -> Vec<RecallSavingsRow> {
    let mut sorted: Vec<f64> = exams.iter().map(ExamOutcome::score).collect();
    sorted.sort_by(f64::total_cmp);
    percentile_grid
        .iter()
        .map(|&p| {
            let t = if sorted.is_empty() {
                f64::INFINITY
            } else {
                percentile_threshold(&sorted, p)
            };
            savings_row(exams, p, t)
        })
        .collect()
}

/// The largest rejection that keeps every cancer reviewed.
pub fn max_safe_rejection(exams: &[ExamOutcome]) -> Result<RecallSavingsRow> {
    let scores: Vec<f64> = exams.iter().map(ExamOutcome::score).collect();
    let labels: Vec<bool> = exams.iter().map(|e| e.cancer).collect();
    let op = operating_point(&scores, &labels, 0.0)?;
    Ok(savings_row(exams, op.base_percentile, op.threshold))
}

/// Integer percentiles 0 through 100.
pub fn default_percentile_grid() -> Vec<f64> {
    (0..=100).map(f64::from).collect()
}
