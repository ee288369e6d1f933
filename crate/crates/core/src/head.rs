//! Image-level prediction head as plain numerics.
//!
//! The convolutional backbone is out of scope: its outputs (target
//! probabilities, objectness, and the classification-branch feature map) are
//! supplied as arrays. Everything downstream of them lives here: score
//! fusion, top-K feature gathering, gated attention, the logistic head, and
//! assembly of the training objective.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{mss, nms_boxes, ScoreGrid, SliceStack};
use crate::error::{Error, Result};
use crate::geometry::{DetBox, Modality, Target};

/// Weight of the L1 consistency term.
pub const CONSISTENCY_WEIGHT: f64 = 10.0;
/// Probability clamp used inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    S,
    M,
    L,
    X,
}

impl Architecture {
    /// `(L, S)` attention dimensions; only the L and X variants carry the
    /// attention head.
    pub fn attention_dims(self) -> Option<(usize, usize)> {
        match self {
            Architecture::L => Some((64, 256)),
            Architecture::X => Some((80, 320)),
            _ => None,
        }
    }
}

/// Classification-branch feature map, shape `(h, w, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Array3<f64>,
}

impl FeatureGrid {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature grid contains non-finite values"));
        }
        Ok(FeatureGrid { values })
    }

    pub fn h(&self) -> usize {
        self.values.dim().0
    }

    pub fn w(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> Array1<f64> {
        self.values.slice(ndarray::s![row, col, ..]).to_owned()
    }
}

/// Gated attention parameters: `w` of length L, `V` and `U` of shape L x S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w: Array1<f64>,
    pub v: Array2<f64>,
    pub u: Array2<f64>,
}

impl AttentionParams {
    pub fn new(w: Array1<f64>, v: Array2<f64>, u: Array2<f64>) -> Result<Self> {
        let l = w.len();
        if v.dim().0 != l || u.dim() != v.dim() {
            return Err(Error::shape(format!(
                "attention params: w has L = {l}, V is {:?}, U is {:?}",
                v.dim(),
                u.dim()
            )));
        }
        Ok(AttentionParams { w, v, u })
    }

    pub fn l(&self) -> usize {
        self.w.len()
    }

    pub fn s(&self) -> usize {
        self.v.dim().1
    }
}

/// Logistic head weights, shape S x 2 (malignant, benign columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_image: Array2<f64>,
}

impl HeadParams {
    pub fn new(w_image: Array2<f64>) -> Result<Self> {
        if w_image.dim().1 != 2 {
            return Err(Error::shape(format!("w_image must be S x 2, got {:?}", w_image.dim())));
        }
        if w_image.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("w_image contains non-finite values"));
        }
        Ok(HeadParams { w_image })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub y_malignant: f64,
    pub y_benign: f64,
}

impl ImagePrediction {
    pub fn get(&self, target: Target) -> f64 {
        match target {
            Target::Malignant => self.y_malignant,
            Target::Benign => self.y_benign,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `F = C * O`, broadcasting the single objectness channel over targets.
pub fn fuse_scores(c: &Array3<f64>, o: &Array3<f64>) -> Result<Array3<f64>> {
    let (h, w, t) = c.dim();
    if t != 2 || o.dim() != (h, w, 1) {
        return Err(Error::shape(format!(
            "expected C (h, w, 2) and O (h, w, 1), got {:?} and {:?}",
            c.dim(),
            o.dim()
        )));
    }
    Ok(c * o)
}

/// Score grid of fused probabilities over per-cell box geometry.
pub fn fused_grid(fused: &Array3<f64>, geometry: &[crate::geometry::BBox2D]) -> Result<ScoreGrid> {
    let (h, w, t) = fused.dim();
    if t != 2 || geometry.len() != h * w {
        return Err(Error::shape(format!(
            "fused scores {:?} need {} cell boxes, got {}",
            fused.dim(),
            h * w,
            geometry.len()
        )));
    }
    let cells = geometry
        .iter()
        .enumerate()
        .map(|(i, g)| crate::detect::GridCandidate {
            geom: *g,
            score_malignant: fused[[i / w, i % w, 0]],
            score_benign: fused[[i / w, i % w, 1]],
        })
        .collect();
    ScoreGrid::new(h, w, cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKConfig {
    pub k: usize,
    pub nms_threshold: f64,
    /// Append max- and average-pooled feature vectors.
    pub include_global_pool: bool,
}

/// Selected boxes and the feature vectors gathered for them.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub boxes: Vec<DetBox>,
    pub features: Vec<Array1<f64>>,
    /// `(max-pooled, average-pooled)` when requested.
    pub pooled: Option<(Array1<f64>, Array1<f64>)>,
    pub requested: usize,
}

impl TopK {
    /// Fewer than K boxes survived NMS.
    pub fn is_short(&self) -> bool {
        self.boxes.len() < self.requested
    }

    /// Attention inputs: box features followed by pooled vectors.
    pub fn vectors(&self) -> Vec<Array1<f64>> {
        let mut out = self.features.clone();
        if let Some((mx, avg)) = &self.pooled {
            out.push(mx.clone());
            out.push(avg.clone());
        }
        out
    }
}

fn global_pool(grids: &[&FeatureGrid]) -> (Array1<f64>, Array1<f64>) {
    let dim = grids[0].dim();
    let mut mx = Array1::from_elem(dim, f64::NEG_INFINITY);
    let mut sum = Array1::zeros(dim);
    let mut n = 0usize;
    for g in grids {
        for cell in g.values.lanes(Axis(2)) {
            mx.zip_mut_with(&cell, |m, &v| *m = m.max(v));
            sum += &cell;
            n += 1;
        }
    }
    (mx, sum / n as f64)
}

/// NMS on fused malignant scores, top-K survivors, and their feature vectors
/// taken from the classification-branch map.
pub fn topk_select(grid: &ScoreGrid, origin: Modality, features: &FeatureGrid, cfg: &TopKConfig) -> Result<TopK> {
    if cfg.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if features.h() != grid.h() || features.w() != grid.w() {
        return Err(Error::shape(format!(
            "feature grid {}x{} does not match score grid {}x{}",
            features.h(),
            features.w(),
            grid.h(),
            grid.w()
        )));
    }
    let mut boxes = nms_boxes(&grid.to_boxes(origin, None), Target::Malignant, cfg.nms_threshold);
    boxes.truncate(cfg.k);
    let feats = boxes
        .iter()
        .map(|b| {
            let (r, c) = b.source_anchor.expect("grid boxes carry anchors");
            features.at(r, c)
        })
        .collect();
    Ok(TopK {
        boxes,
        features: feats,
        pooled: cfg.include_global_pool.then(|| global_pool(&[features])),
        requested: cfg.k,
    })
}

/// Softmax over `w . (tanh(V q_k) * sigmoid(U q_k))`.
pub fn gated_attention(q: &[Array1<f64>], p: &AttentionParams) -> Result<Vec<f64>> {
    if q.is_empty() {
        return Err(Error::invalid("attention needs at least one vector"));
    }
    if let Some(bad) = q.iter().find(|v| v.len() != p.s()) {
        return Err(Error::shape(format!(
            "feature vector has length {}, attention expects S = {}",
            bad.len(),
            p.s()
        )));
    }
    let logits: Vec<f64> = q
        .iter()
        .map(|qk| {
            let a = p.v.dot(qk).mapv(f64::tanh);
            let g = p.u.dot(qk).mapv(sigmoid);
            p.w.dot(&(a * g))
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `sigmoid(w_image^T sum_k alpha_k q_k)`.
pub fn image_prediction(q: &[Array1<f64>], alpha: &[f64], head: &HeadParams) -> Result<ImagePrediction> {
    if q.len() != alpha.len() || q.is_empty() {
        return Err(Error::shape(format!(
            "{} vectors but {} attention weights",
            q.len(),
            alpha.len()
        )));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("attention weights sum to {total}, expected 1")));
    }
    let s = head.w_image.dim().0;
    let mut z = Array1::zeros(s);
    for (qk, &a) in q.iter().zip(alpha) {
        if qk.len() != s {
            return Err(Error::shape(format!("feature length {} vs head S = {s}", qk.len())));
        }
        z.scaled_add(a, qk);
    }
    let logits = head.w_image.t().dot(&z);
    Ok(ImagePrediction {
        y_malignant: sigmoid(logits[0]),
        y_benign: sigmoid(logits[1]),
    })
}

/// Attention and logistic head together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHead {
    pub attention: AttentionParams,
    pub head: HeadParams,
}

impl ImageHead {
    pub fn new(attention: AttentionParams, head: HeadParams) -> Result<Self> {
        if attention.s() != head.w_image.dim().0 {
            return Err(Error::shape(format!(
                "attention S = {} but w_image has {} rows",
                attention.s(),
                head.w_image.dim().0
            )));
        }
        Ok(ImageHead { attention, head })
    }

    pub fn predict(&self, q: &[Array1<f64>]) -> Result<(Vec<f64>, ImagePrediction)> {
        let alpha = gated_attention(q, &self.attention)?;
        let y = image_prediction(q, &alpha, &self.head)?;
        Ok((alpha, y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub prediction: ImagePrediction,
    pub alpha: Vec<f64>,
    pub topk: TopK,
}

/// 2D path: top-K on one image's fused grid, then attention and head.
pub fn predict_2d(
    grid: &ScoreGrid,
    origin: Modality,
    features: &FeatureGrid,
    cfg: &TopKConfig,
    model: &ImageHead,
) -> Result<HeadOutput> {
    let topk = topk_select(grid, origin, features, cfg)?;
    let (alpha, prediction) = model.predict(&topk.vectors())?;
    Ok(HeadOutput {
        prediction,
        alpha,
        topk,
    })
}

/// DBT inference path: Max-Slice-Selection on malignant scores over the
/// whole volume, top-K across all slices, features gathered from each box's
/// own slice. Pooled vectors, when enabled, cover the slices that host the
/// selected boxes.
pub fn dbt_image_prediction(
    stack: &SliceStack,
    features: &[FeatureGrid],
    cfg: &TopKConfig,
    model: &ImageHead,
) -> Result<HeadOutput> {
    if cfg.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if features.len() != stack.n_slices() {
        return Err(Error::shape(format!(
            "{} feature grids for {} slices",
            features.len(),
            stack.n_slices()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.h() != stack.h() || f.w() != stack.w()) {
        return Err(Error::shape(format!(
            "feature grid {}x{} does not match stack {}x{}",
            f.h(),
            f.w(),
            stack.h(),
            stack.w()
        )));
    }
    let mut boxes = mss(stack, Target::Malignant, cfg.nms_threshold);
    boxes.truncate(cfg.k);
    let feats: Vec<Array1<f64>> = boxes
        .iter()
        .map(|b| {
            let (r, c) = b.source_anchor.expect("stack boxes carry anchors");
            features[b.slice.expect("stack boxes carry slices") as usize].at(r, c)
        })
        .collect();
    let pooled = if cfg.include_global_pool && !boxes.is_empty() {
        let mut slices: Vec<usize> = boxes.iter().filter_map(|b| b.slice).map(|s| s as usize).collect();
        slices.sort_unstable();
        slices.dedup();
        let grids: Vec<&FeatureGrid> = slices.iter().map(|&s| &features[s]).collect();
        Some(global_pool(&grids))
    } else {
        None
    };
    let topk = TopK {
        boxes,
        features: feats,
        pooled,
        requested: cfg.k,
    };
    let (alpha, prediction) = model.predict(&topk.vectors())?;
    Ok(HeadOutput {
        prediction,
        alpha,
        topk,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `None` when the detection loss is skipped for this image.
    pub detection_term: Option<f64>,
    pub bce_term: f64,
    pub consistency_term: f64,
    pub total: f64,
    /// d(consistency)/d(y_malignant). The top-1 box score is detached and
    /// receives no sensitivity.
    pub consistency_grad_y_malignant: f64,
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Whether the detection loss applies: skipped only for positive images
/// without box labels.
pub fn detection_loss_applies(n_gt_boxes: usize, labels: [f64; 2]) -> bool {
    n_gt_boxes != 0 || labels[0] + labels[1] < 1.0
}

/// Training objective for one image.
///
/// `det_loss` comes from an external detection-loss provider and is
/// required whenever the detection term applies.
pub fn compose_loss(
    det_loss: Option<f64>,
    y_hat: &ImagePrediction,
    labels: [f64; 2],
    top1_malignant_score: f64,
    n_gt_boxes: usize,
    consistency_weight: f64,
) -> Result<LossBreakdown> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("breast labels must be 0 or 1, got {labels:?}")));
    }
    let detection_term = if detection_loss_applies(n_gt_boxes, labels) {
        let d = det_loss.ok_or_else(|| Error::invalid("detection loss applies to this image but none was supplied"))?;
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::invalid(format!(
                "detection loss must be finite and >= 0, got {d}"
            )));
        }
        Some(d)
    } else {
        None
    };
    let bce_term = bce(y_hat.y_malignant, labels[0]) + bce(y_hat.y_benign, labels[1]);
    let diff = y_hat.y_malignant - top1_malignant_score;
    let consistency_term = consistency_weight * diff.abs();
    let grad = if diff == 0.0 {
        0.0
    } else {
        consistency_weight * diff.signum()
    };
    Ok(LossBreakdown {
        detection_term,
        bce_term,
        consistency_term,
        total: detection_term.unwrap_or(0.0) + bce_term + consistency_term,
        consistency_grad_y_malignant: grad,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabels {
    pub boxes: Vec<DetBox>,
    pub warnings: Vec<String>,
}

/// Top-1 malignant box for malignant breasts, top-1 benign box for benign
/// breasts. Boxes are expected to be NMS-deduplicated already.
pub fn pseudo_labels(boxes: &[DetBox], malignant: bool, benign: bool) -> PseudoLabels {
    let mut out = PseudoLabels::default();
    for (positive, target) in [(malignant, Target::Malignant), (benign, Target::Benign)] {
        if !positive {
            continue;
        }
        // First maximum wins on ties.
        let best = boxes
            .iter()
            .reduce(|a, b| if b.score(target) > a.score(target) { b } else { a });
        match best {
            Some(b) => out.boxes.push(b.clone()),
            None => out
                .warnings
                .push(format!("positive {target:?} label but no box predictions")),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Validate,
}

/// Annotated slices of one lesion in a DBT volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionSlices {
    pub slices: Vec<u32>,
}

impl LesionSlices {
    pub fn center(&self) -> Option<u32> {
        let lo = *self.slices.iter().min()?;
        let hi = *self.slices.iter().max()?;
        Some((lo + hi) / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceChoice {
    Slice(u32),
    /// Load the C-View synthesized from this DBT instead.
    CviewFallback,
}

/// Which input to load for a DBT image during training or validation.
pub fn training_slice_policy<R: Rng + ?Sized>(
    n_slices: u32,
    lesions: &[LesionSlices],
    positive: bool,
    phase: Phase,
    rng: &mut R,
) -> Result<SliceChoice> {
    if n_slices == 0 {
        return Err(Error::invalid("DBT volume has no slices"));
    }
    let mut annotated: Vec<u32> = lesions.iter().flat_map(|l| l.slices.iter().copied()).collect();
    annotated.sort_unstable();
    annotated.dedup();
    if let Some(&s) = annotated.iter().find(|&&s| s >= n_slices) {
        return Err(Error::invalid(format!("annotated slice {s} outside {n_slices} slices")));
    }
    let choice = match (phase, annotated.is_empty(), positive) {
        (Phase::Train, false, _) => SliceChoice::Slice(annotated[rng.random_range(0..annotated.len())]),
        (Phase::Validate, false, _) => {
            let lesion = lesions.iter().find_map(|l| l.center()).expect("non-empty annotations");
            SliceChoice::Slice(lesion)
        }
        (_, true, true) => SliceChoice::CviewFallback,
        (Phase::Train, true, false) => SliceChoice::Slice(rng.random_range(0..n_slices)),
        (Phase::Validate, true, false) => SliceChoice::Slice(n_slices / 2),
    };
    Ok(choice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::GridCandidate;
    use crate::geometry::BBox2D;
    use crate::rng::seeded;
    use ndarray::{arr1, Array};
    use rand::Rng;

    fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
        Array::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)))
    }

    fn random_params<R: Rng>(rng: &mut R, l: usize, s: usize) -> AttentionParams {
        let v = Array2::from_shape_fn((l, s), |_| rng.random_range(-0.5..0.5));
        let u = Array2::from_shape_fn((l, s), |_| rng.random_range(-0.5..0.5));
        AttentionParams::new(random_vec(rng, l), v, u).unwrap()
    }

    /// Formula transcribed with scalar loops only.
    fn reference_attention(q: &[Array1<f64>], p: &AttentionParams) -> Vec<f64> {
        let (l, s) = (p.l(), p.s());
        let raw: Vec<f64> = q
            .iter()
            .map(|qk| {
                let mut acc = 0.0;
                for i in 0..l {
                    let (mut vq, mut uq) = (0.0, 0.0);
                    for j in 0..s {
                        vq += p.v[[i, j]] * qk[j];
                        uq += p.u[[i, j]] * qk[j];
                    }
                    acc += p.w[i] * vq.tanh() * (1.0 / (1.0 + (-uq).exp()));
                }
                acc.exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|r| r / z).collect()
    }

    #[test]
    fn fuse_examples() {
        let c = Array3::from_shape_fn((2, 3, 2), |(r, c, t)| 0.1 * (r + c + t) as f64);
        let ones = Array3::ones((2, 3, 1));
        assert_eq!(fuse_scores(&c, &ones).unwrap(), c);

        let c = Array3::from_elem((1, 1, 2), 0.8);
        let o = Array3::from_elem((1, 1, 1), 0.5);
        assert!((fuse_scores(&c, &o).unwrap()[[0, 0, 0]] - 0.4).abs() < 1e-15);
        assert!(fuse_scores(&c, &Array3::ones((2, 1, 1))).is_err());
    }

    #[test]
    fn fused_scores_bounded_by_inputs() {
        let mut rng = seeded(1);
        let c = Array3::from_shape_fn((4, 5, 2), |_| rng.random_range(0.0..=1.0));
        let o = Array3::from_shape_fn((4, 5, 1), |_| rng.random_range(0.0..=1.0));
        let f = fuse_scores(&c, &o).unwrap();
        for ((r, col, t), &v) in f.indexed_iter() {
            assert!(v <= c[[r, col, t]].min(o[[r, col, 0]]) + 1e-15);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    fn cell_grid(h: usize, w: usize, scores: &[f64]) -> ScoreGrid {
        let cells = (0..h * w)
            .map(|i| GridCandidate {
                geom: BBox2D::new((i % w) as f64 * 8.0 + 4.0, (i / w) as f64 * 8.0 + 4.0, 6.0, 6.0).unwrap(),
                score_malignant: scores[i],
                score_benign: 0.5 * scores[i],
            })
            .collect();
        ScoreGrid::new(h, w, cells).unwrap()
    }

    #[test]
    fn topk_single_dominant_cell() {
        let grid = cell_grid(2, 2, &[0.1, 0.95, 0.05, 0.2]);
        let feats = FeatureGrid::new(Array3::from_shape_fn((2, 2, 3), |(r, c, d)| {
            (r * 10 + c) as f64 + 0.1 * d as f64
        }))
        .unwrap();
        let cfg = TopKConfig {
            k: 1,
            nms_threshold: 0.5,
            include_global_pool: false,
        };
        let top = topk_select(&grid, Modality::Ffdm, &feats, &cfg).unwrap();
        assert_eq!(top.features, vec![arr1(&[1.0, 1.1, 1.2])]);
        assert_eq!(top.boxes[0].source_anchor, Some((0, 1)));
    }

    #[test]
    fn topk_global_pool_of_constant_grid() {
        let grid = cell_grid(3, 3, &[0.5; 9]);
        let feats = FeatureGrid::new(Array3::from_elem((3, 3, 4), 0.25)).unwrap();
        let cfg = TopKConfig {
            k: 2,
            nms_threshold: 0.5,
            include_global_pool: true,
        };
        let top = topk_select(&grid, Modality::Cview, &feats, &cfg).unwrap();
        let (mx, avg) = top.pooled.clone().unwrap();
        assert_eq!(mx, Array1::from_elem(4, 0.25));
        assert_eq!(avg, Array1::from_elem(4, 0.25));
        assert_eq!(top.vectors().len(), 4);
    }

    #[test]
    fn topk_reports_short_selection() {
        // All cells overlap one another, so one survivor remains.
        let cells = (0..4)
            .map(|i| GridCandidate {
                geom: BBox2D::new(10.0, 10.0, 8.0, 8.0).unwrap(),
                score_malignant: 0.1 * (i + 1) as f64,
                score_benign: 0.0,
            })
            .collect();
        let grid = ScoreGrid::new(2, 2, cells).unwrap();
        let feats = FeatureGrid::new(Array3::zeros((2, 2, 2))).unwrap();
        let cfg = TopKConfig {
            k: 3,
            nms_threshold: 0.5,
            include_global_pool: false,
        };
        let top = topk_select(&grid, Modality::Ffdm, &feats, &cfg).unwrap();
        assert_eq!(top.boxes.len(), 1);
        assert!(top.is_short());
    }

    #[test]
    fn topk_matches_sort_then_nms_reference() {
        let mut rng = seeded(8);
        for _ in 0..50 {
            let (h, w) = (4, 5);
            let cells: Vec<GridCandidate> = (0..h * w)
                .map(|i| GridCandidate {
                    geom: BBox2D::new(
                        (i % w) as f64 * 6.0 + rng.random_range(-2.0..2.0),
                        (i / w) as f64 * 6.0 + rng.random_range(-2.0..2.0),
                        rng.random_range(4.0..12.0),
                        rng.random_range(4.0..12.0),
                    )
                    .unwrap(),
                    score_malignant: rng.random_range(0.0..1.0),
                    score_benign: rng.random_range(0.0..1.0),
                })
                .collect();
            let grid = ScoreGrid::new(h, w, cells.clone()).unwrap();
            let feats = FeatureGrid::new(Array3::from_shape_fn((h, w, 2), |(r, c, d)| {
                (r * w + c) as f64 * 2.0 + d as f64
            }))
            .unwrap();
            let cfg = TopKConfig {
                k: 5,
                nms_threshold: 0.3,
                include_global_pool: false,
            };
            let top = topk_select(&grid, Modality::Ffdm, &feats, &cfg).unwrap();

            let mut order: Vec<usize> = (0..h * w).collect();
            order.sort_by(|&a, &b| cells[b].score_malignant.partial_cmp(&cells[a].score_malignant).unwrap());
            let mut kept: Vec<usize> = Vec::new();
            for i in order {
                if kept
                    .iter()
                    .all(|&k| crate::geometry::iou(&cells[k].geom, &cells[i].geom) <= 0.3)
                {
                    kept.push(i);
                }
            }
            kept.truncate(5);
            let got: Vec<usize> = top
                .boxes
                .iter()
                .map(|b| {
                    let (r, c) = b.source_anchor.unwrap();
                    r * w + c
                })
                .collect();
            assert_eq!(got, kept);
            for (f, &i) in top.features.iter().zip(&kept) {
                assert_eq!(f[0], i as f64 * 2.0);
            }
        }
    }

    #[test]
    fn attention_trivial_cases() {
        let mut rng = seeded(2);
        let p = random_params(&mut rng, 4, 6);
        let q = random_vec(&mut rng, 6);
        assert_eq!(gated_attention(std::slice::from_ref(&q), &p).unwrap(), vec![1.0]);
        let a = gated_attention(&[q.clone(), q], &p).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        assert!(gated_attention(&[], &p).is_err());
        assert!(gated_attention(&[arr1(&[1.0])], &p).is_err());
    }

    #[test]
    fn attention_matches_scalar_transcription() {
        let mut rng = seeded(3);
        for _ in 0..100 {
            let p = random_params(&mut rng, 8, 12);
            let k = rng.random_range(1..10);
            let q: Vec<Array1<f64>> = (0..k).map(|_| random_vec(&mut rng, 12)).collect();
            let got = gated_attention(&q, &p).unwrap();
            let want = reference_attention(&q, &p);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = seeded(4);
        let p = random_params(&mut rng, 5, 7);
        let q: Vec<Array1<f64>> = (0..4).map(|_| random_vec(&mut rng, 7)).collect();
        let a = gated_attention(&q, &p).unwrap();
        let perm = [2, 0, 3, 1];
        let qp: Vec<Array1<f64>> = perm.iter().map(|&i| q[i].clone()).collect();
        let ap = gated_attention(&qp, &p).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((ap[j] - a[i]).abs() < 1e-15);
        }
        let head = HeadParams::new(Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
        let y = image_prediction(&q, &a, &head).unwrap();
        let yp = image_prediction(&qp, &ap, &head).unwrap();
        assert!((y.y_malignant - yp.y_malignant).abs() < 1e-14);
    }

    #[test]
    fn image_prediction_examples() {
        let q = vec![arr1(&[1.0, -2.0, 3.0]), arr1(&[0.5, 0.5, 0.5])];
        let zero = HeadParams::new(Array2::zeros((3, 2))).unwrap();
        let y = image_prediction(&q, &[0.3, 0.7], &zero).unwrap();
        assert_eq!((y.y_malignant, y.y_benign), (0.5, 0.5));

        let head = HeadParams::new(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])).unwrap();
        let y = image_prediction(&q, &[1.0, 0.0], &head).unwrap();
        assert!((y.y_malignant - sigmoid(1.0)).abs() < 1e-15);
        assert!((y.y_benign - sigmoid(-2.0)).abs() < 1e-15);

        assert!(image_prediction(&q, &[0.5, 0.6], &head).is_err());
    }

    #[test]
    fn image_prediction_matches_dot_product_reference() {
        let mut rng = seeded(5);
        for _ in 0..100 {
            let s = 9;
            let k = rng.random_range(1..6);
            let q: Vec<Array1<f64>> = (0..k).map(|_| random_vec(&mut rng, s)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let tot: f64 = raw.iter().sum();
            let alpha: Vec<f64> = raw.iter().map(|r| r / tot).collect();
            let wi = Array2::from_shape_fn((s, 2), |_| rng.random_range(-1.0..1.0));
            let head = HeadParams::new(wi.clone()).unwrap();
            let y = image_prediction(&q, &alpha, &head).unwrap();
            for t in 0..2 {
                let mut logit = 0.0;
                for j in 0..s {
                    let zj: f64 = (0..k).map(|i| alpha[i] * q[i][j]).sum();
                    logit += wi[[j, t]] * zj;
                }
                let want = 1.0 / (1.0 + (-logit).exp());
                let got = if t == 0 { y.y_malignant } else { y.y_benign };
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn architecture_dims() {
        assert_eq!(Architecture::L.attention_dims(), Some((64, 256)));
        assert_eq!(Architecture::X.attention_dims(), Some((80, 320)));
        assert_eq!(Architecture::S.attention_dims(), None);
    }

    #[test]
    fn loss_indicator_examples() {
        let y = ImagePrediction {
            y_malignant: 0.7,
            y_benign: 0.2,
        };
        let l = compose_loss(Some(3.0), &y, [1.0, 0.0], 0.6, 0, 10.0).unwrap();
        assert_eq!(l.detection_term, None);
        assert!((l.total - (l.bce_term + l.consistency_term)).abs() < 1e-15);

        let l = compose_loss(Some(3.0), &y, [0.0, 0.0], 0.6, 0, 10.0).unwrap();
        assert_eq!(l.detection_term, Some(3.0));

        let l = compose_loss(Some(3.0), &y, [1.0, 0.0], 0.7, 2, 10.0).unwrap();
        assert_eq!(l.consistency_term, 0.0);
        assert_eq!(l.consistency_grad_y_malignant, 0.0);

        assert!(compose_loss(Some(1.0), &y, [0.5, 0.0], 0.7, 1, 10.0).is_err());
        assert!(compose_loss(None, &y, [0.0, 0.0], 0.7, 1, 10.0).is_err());
    }

    #[test]
    fn loss_terms_are_exact() {
        let y = ImagePrediction {
            y_malignant: 0.8,
            y_benign: 0.3,
        };
        let l = compose_loss(Some(1.5), &y, [1.0, 1.0], 0.5, 1, CONSISTENCY_WEIGHT).unwrap();
        let bce = -(0.8f64.ln()) - (0.3f64.ln());
        assert!((l.bce_term - bce).abs() < 1e-12);
        assert!((l.consistency_term - 3.0).abs() < 1e-12);
        assert_eq!(l.consistency_grad_y_malignant, 10.0);
        assert!((l.total - (1.5 + bce + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_is_clamped() {
        let y = ImagePrediction {
            y_malignant: 1.0,
            y_benign: 0.0,
        };
        let l = compose_loss(None, &y, [0.0, 1.0], 1.0, 0, 10.0).unwrap();
        assert_eq!(l.detection_term, None);
        assert!(l.bce_term.is_finite());
        assert!((l.bce_term - 2.0 * -(BCE_EPS.ln())).abs() < 1e-6);
    }

    #[test]
    fn pseudo_label_examples() {
        let mk = |sm, sb| DetBox::new(BBox2D::new(5.0, 5.0, 2.0, 2.0).unwrap(), sm, sb, Modality::Ffdm);
        let boxes = vec![mk(0.2, 0.9), mk(0.8, 0.1), mk(0.5, 0.4)];
        let p = pseudo_labels(&boxes, true, false);
        assert_eq!(p.boxes, vec![boxes[1].clone()]);
        let p = pseudo_labels(&boxes, true, true);
        assert_eq!(p.boxes, vec![boxes[1].clone(), boxes[0].clone()]);
        assert!(pseudo_labels(&boxes, false, false).boxes.is_empty());
        let p = pseudo_labels(&[], true, false);
        assert!(p.boxes.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn slice_policy_cases() {
        let mut rng = seeded(6);
        assert_eq!(
            training_slice_policy(71, &[], false, Phase::Validate, &mut rng).unwrap(),
            SliceChoice::Slice(35)
        );
        assert_eq!(
            training_slice_policy(71, &[], true, Phase::Train, &mut rng).unwrap(),
            SliceChoice::CviewFallback
        );
        assert_eq!(
            training_slice_policy(71, &[], true, Phase::Validate, &mut rng).unwrap(),
            SliceChoice::CviewFallback
        );
        let lesion = [LesionSlices {
            slices: (20..=30).collect(),
        }];
        assert_eq!(
            training_slice_policy(71, &lesion, true, Phase::Validate, &mut rng).unwrap(),
            SliceChoice::Slice(25)
        );
        assert!(training_slice_policy(10, &lesion, true, Phase::Train, &mut rng).is_err());
    }

    #[test]
    fn slice_policy_train_draws_annotated_uniformly() {
        let mut rng = seeded(7);
        let lesion = [LesionSlices {
            slices: (10..=14).collect(),
        }];
        let mut counts = [0usize; 5];
        for _ in 0..1000 {
            match training_slice_policy(60, &lesion, true, Phase::Train, &mut rng).unwrap() {
                SliceChoice::Slice(s) => {
                    assert!((10..=14).contains(&s));
                    counts[(s - 10) as usize] += 1;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        // Expected 200 each; 4.5 sigma band.
        for c in counts {
            assert!((143..=257).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn slice_policy_train_negative_random_slice() {
        let mut rng = seeded(8);
        for _ in 0..200 {
            match training_slice_policy(40, &[], false, Phase::Train, &mut rng).unwrap() {
                SliceChoice::Slice(s) => assert!(s < 40),
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}
