//! Duplicate removal and aggregation of bounding-box predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    iou, largest_connected_component, mask_iou, BBox2D, DetBox, ImageKey, Laterality, Mask, Modality, Target, View,
};

/// IoU threshold for pooling FFDM, C-View and DBT boxes in C-View space.
pub const MULTIMODAL_IOU: f64 = 0.05;
/// FFDM/C-View foreground IoU below which a pair is not field-of-view aligned.
pub const TRIPLET_IOU_THRESHOLD: f64 = 0.96589;
/// Rows ignored at the top and bottom of foreground masks when pairing.
pub const TRIPLET_EXCLUDE_ROWS: usize = 50;
/// Known FFDM -> C-View resolution pairs, `(rows, cols)`.
pub const HOLOGIC_RESIZE_PAIRS: [((usize, usize), (usize, usize)); 2] =
    [((4096, 3328), (2457, 1996)), ((3328, 2560), (2457, 1890))];
/// Relative aspect-ratio tolerance for resolutions outside the known pairs.
pub const ASPECT_TOLERANCE: f64 = 1e-3;

/// A survivor of NMS together with the inputs it suppressed.
#[derive(Debug, Clone, PartialEq)]
pub struct Survivor {
    pub det: DetBox,
    /// Index of the box in the NMS input.
    pub index: usize,
    /// Input indices suppressed by this box, in processing order.
    pub suppressed: Vec<usize>,
}

/// Greedy NMS on `target` score.
///
/// Boxes are visited by descending score (stable on input index). A box is
/// kept iff its IoU with every kept box is `<= iou_threshold`; otherwise it
/// is attributed to the first kept box that overlaps it beyond the threshold.
pub fn nms(boxes: &[DetBox], target: Target, iou_threshold: f64) -> Vec<Survivor> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score(target).total_cmp(&boxes[a].score(target)));
    let mut kept: Vec<Survivor> = Vec::new();
    for idx in order {
        let cand = &boxes[idx];
        match kept.iter_mut().find(|k| iou(&k.det.geom, &cand.geom) > iou_threshold) {
            Some(k) => k.suppressed.push(idx),
            None => kept.push(Survivor {
                det: cand.clone(),
                index: idx,
                suppressed: Vec::new(),
            }),
        }
    }
    kept
}

/// [`nms`] without provenance.
pub fn nms_boxes(boxes: &[DetBox], target: Target, iou_threshold: f64) -> Vec<DetBox> {
    nms(boxes, target, iou_threshold).into_iter().map(|s| s.det).collect()
}

/// One candidate per feature-grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub geom: BBox2D,
    pub score_malignant: f64,
    pub score_benign: f64,
}

impl GridCandidate {
    pub fn score(&self, target: Target) -> f64 {
        match target {
            Target::Malignant => self.score_malignant,
            Target::Benign => self.score_benign,
        }
    }
}

/// Box predictions laid out on an `h x w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    h: usize,
    w: usize,
    cells: Vec<GridCandidate>,
}

impl ScoreGrid {
    pub fn new(h: usize, w: usize, cells: Vec<GridCandidate>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::shape(format!(
                "score grid has {} candidates, expected {h} x {w}",
                cells.len()
            )));
        }
        for c in &cells {
            c.geom.validate()?;
            if !(0.0..=1.0).contains(&c.score_malignant) || !(0.0..=1.0).contains(&c.score_benign) {
                return Err(Error::invalid("grid scores must lie in [0, 1]"));
            }
        }
        Ok(ScoreGrid { h, w, cells })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[GridCandidate] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> &GridCandidate {
        &self.cells[row * self.w + col]
    }

    /// Grid candidates as boxes carrying their anchor cell.
    pub fn to_boxes(&self, origin: Modality, slice: Option<u32>) -> Vec<DetBox> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| DetBox {
                geom: c.geom,
                slice,
                score_malignant: c.score_malignant,
                score_benign: c.score_benign,
                origin,
                source_anchor: Some((i / self.w, i % self.w)),
            })
            .collect()
    }
}

/// Per-slice score grids of one DBT volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStack {
    grids: Vec<ScoreGrid>,
}

impl SliceStack {
    pub fn new(grids: Vec<ScoreGrid>) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::invalid("slice stack needs at least one slice"))?;
        let (h, w) = (first.h, first.w);
        if let Some(i) = grids.iter().position(|g| g.h != h || g.w != w) {
            return Err(Error::shape(format!(
                "slice {i} is {}x{}, slice 0 is {h}x{w}",
                grids[i].h, grids[i].w
            )));
        }
        Ok(SliceStack { grids })
    }

    pub fn n_slices(&self) -> usize {
        self.grids.len()
    }

    pub fn h(&self) -> usize {
        self.grids[0].h
    }

    pub fn w(&self) -> usize {
        self.grids[0].w
    }

    pub fn grids(&self) -> &[ScoreGrid] {
        &self.grids
    }

    /// All slices' candidates, slice-major.
    pub fn all_boxes(&self) -> Vec<DetBox> {
        self.grids
            .iter()
            .enumerate()
            .flat_map(|(s, g)| g.to_boxes(Modality::Dbt, Some(s as u32)))
            .collect()
    }

    /// Depth argmax per cell: the `1 x h x w` layer of best-slice candidates.
    /// Equal maxima resolve to the lowest slice.
    pub fn depth_max(&self, target: Target) -> Vec<DetBox> {
        let (h, w) = (self.h(), self.w());
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let mut best = 0;
            for s in 1..self.grids.len() {
                if self.grids[s].cells[i].score(target) > self.grids[best].cells[i].score(target) {
                    best = s;
                }
            }
            let c = &self.grids[best].cells[i];
            out.push(DetBox {
                geom: c.geom,
                slice: Some(best as u32),
                score_malignant: c.score_malignant,
                score_benign: c.score_benign,
                origin: Modality::Dbt,
                source_anchor: Some((i / w, i % w)),
            });
        }
        out
    }
}

/// Max-Slice-Selection: depth argmax per cell, planar NMS over the resulting
/// layer, survivors returned at their originating slice, score-descending.
pub fn mss(stack: &SliceStack, target: Target, iou_threshold: f64) -> Vec<DetBox> {
    nms_boxes(&stack.depth_max(target), target, iou_threshold)
}

/// Image resolution bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeom {
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_slices: Option<u32>,
}

impl ImageGeom {
    pub fn new(rows: usize, cols: usize, n_slices: Option<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || n_slices == Some(0) {
            return Err(Error::invalid("image geometry needs positive dimensions"));
        }
        Ok(ImageGeom { rows, cols, n_slices })
    }

    pub fn planar(rows: usize, cols: usize) -> Self {
        ImageGeom {
            rows,
            cols,
            n_slices: None,
        }
    }

    fn aspect(&self) -> f64 {
        self.rows as f64 / self.cols as f64
    }
}

/// Rescale boxes from one image geometry to another. Slice indices are kept
/// on the boxes but never enter the planar geometry.
pub fn to_shared_space(boxes: &[DetBox], from: &ImageGeom, to: &ImageGeom) -> Vec<DetBox> {
    let sx = to.cols as f64 / from.cols as f64;
    let sy = to.rows as f64 / from.rows as f64;
    boxes
        .iter()
        .map(|b| DetBox {
            geom: b.geom.scaled(sx, sy),
            ..b.clone()
        })
        .collect()
}

/// Result of pooling boxes from all three modalities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultimodalEnsemble {
    /// Survivors; displayed on FFDM and C-View.
    pub unified: Vec<DetBox>,
    /// Survivors that are DBT-origin or suppressed a DBT box, each carrying a
    /// slice index.
    pub dbt_displayable: Vec<DetBox>,
}

/// NMS at [`MULTIMODAL_IOU`] over the concatenated modality sets. All boxes
/// must already be in the C-View coordinate space.
pub fn ensemble_boxes_multimodal(per_modality: &BTreeMap<Modality, Vec<DetBox>>, target: Target) -> MultimodalEnsemble {
    ensemble_boxes_multimodal_at(per_modality, target, MULTIMODAL_IOU)
}

pub fn ensemble_boxes_multimodal_at(
    per_modality: &BTreeMap<Modality, Vec<DetBox>>,
    target: Target,
    iou_threshold: f64,
) -> MultimodalEnsemble {
    let all: Vec<DetBox> = Modality::ALL
        .iter()
        .filter_map(|m| per_modality.get(m))
        .flat_map(|v| v.iter().cloned())
        .collect();
    let survivors = nms(&all, target, iou_threshold);
    let mut out = MultimodalEnsemble::default();
    for s in survivors {
        let slice = if s.det.origin == Modality::Dbt {
            s.det.slice
        } else {
            // Suppressed lists are already in descending score order.
            s.suppressed
                .iter()
                .map(|&i| &all[i])
                .find(|b| b.origin == Modality::Dbt)
                .and_then(|b| b.slice)
        };
        if let Some(slice) = slice {
            out.dbt_displayable.push(DetBox {
                slice: Some(slice),
                ..s.det.clone()
            });
        }
        out.unified.push(s.det);
    }
    out
}

/// Foreground mask and metadata of one image considered for triplet matching.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletCandidate {
    pub key: ImageKey,
    pub geom: ImageGeom,
    pub mask: Mask,
    /// Shared by a C-View and the DBT it was synthesized from.
    pub acquisition_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMatch {
    pub ffdm: ImageKey,
    pub cview: ImageKey,
    pub dbt: ImageKey,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchWarning {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletReport {
    pub matches: Vec<TripletMatch>,
    pub warnings: Vec<MatchWarning>,
}

/// C-View resolution an FFDM mask must be resized to before comparison, or
/// `None` when the aspect ratios are incompatible.
pub fn ffdm_resize_target(ffdm: &ImageGeom, cview: &ImageGeom) -> Option<(usize, usize)> {
    let f = (ffdm.rows, ffdm.cols);
    let c = (cview.rows, cview.cols);
    if let Some(&(_, to)) = HOLOGIC_RESIZE_PAIRS.iter().find(|(from, _)| *from == f) {
        return (to == c).then_some(to);
    }
    let rel = (ffdm.aspect() / cview.aspect() - 1.0).abs();
    (rel <= ASPECT_TOLERANCE).then_some(c)
}

/// Pair FFDM, C-View and DBT images of the same exam view.
///
/// Per `(exam, laterality, view)`: every FFDM/C-View pair is scored by the
/// banded IoU of the largest foreground components (FFDM resized to the
/// C-View resolution); pairs below [`TRIPLET_IOU_THRESHOLD`] are dropped;
/// each C-View keeps its best FFDM and is joined to the DBT sharing its
/// acquisition id.
pub fn match_triplets(images: &[TripletCandidate]) -> Result<TripletReport> {
    match_triplets_at(images, TRIPLET_IOU_THRESHOLD, TRIPLET_EXCLUDE_ROWS)
}

pub fn match_triplets_at(images: &[TripletCandidate], threshold: f64, exclude_rows: usize) -> Result<TripletReport> {
    type ViewKey = (String, Laterality, View);
    let mut groups: BTreeMap<ViewKey, [Vec<&TripletCandidate>; 3]> = BTreeMap::new();
    for img in images {
        if img.mask.rows() != img.geom.rows || img.mask.cols() != img.geom.cols {
            return Err(Error::shape(format!(
                "mask of {} is {}x{}, geometry says {}x{}",
                img.key.image_id,
                img.mask.rows(),
                img.mask.cols(),
                img.geom.rows,
                img.geom.cols
            )));
        }
        let slot = match img.key.modality {
            Modality::Ffdm => 0,
            Modality::Cview => 1,
            Modality::Dbt => 2,
        };
        groups
            .entry((img.key.exam_id.clone(), img.key.laterality, img.key.view))
            .or_default()[slot]
            .push(img);
    }

    let mut report = TripletReport::default();
    for [ffdms, cviews, dbts] in groups.values() {
        let cview_fg: Vec<Mask> = cviews.iter().map(|c| largest_connected_component(&c.mask)).collect();
        let mut ffdm_fg: BTreeMap<(usize, (usize, usize)), Mask> = BTreeMap::new();
        for (ci, cview) in cviews.iter().enumerate() {
            let mut best: Option<(f64, &TripletCandidate)> = None;
            for (fi, ffdm) in ffdms.iter().enumerate() {
                let Some(target) = ffdm_resize_target(&ffdm.geom, &cview.geom) else {
                    report.warnings.push(MatchWarning {
                        image_id: ffdm.key.image_id.clone(),
                        message: format!(
                            "FFDM {}x{} has no aspect match for C-View {} ({}x{})",
                            ffdm.geom.rows, ffdm.geom.cols, cview.key.image_id, cview.geom.rows, cview.geom.cols
                        ),
                    });
                    continue;
                };
                let fg = ffdm_fg
                    .entry((fi, target))
                    .or_insert_with(|| largest_connected_component(&ffdm.mask.resize_nearest(target.0, target.1)));
                let m = mask_iou(fg, &cview_fg[ci], exclude_rows)?;
                if !m.valid || m.value < threshold {
                    continue;
                }
                if best.is_none_or(|(v, _)| m.value > v) {
                    best = Some((m.value, ffdm));
                }
            }
            let Some((value, ffdm)) = best else { continue };
            let dbt = dbts
                .iter()
                .find(|d| d.acquisition_id.is_some() && d.acquisition_id == cview.acquisition_id);
            match dbt {
                Some(dbt) => report.matches.push(TripletMatch {
                    ffdm: ffdm.key.clone(),
                    cview: cview.key.clone(),
                    dbt: dbt.key.clone(),
                    iou: value,
                }),
                None => report.warnings.push(MatchWarning {
                    image_id: cview.key.image_id.clone(),
                    message: "no DBT shares this C-View's acquisition id".into(),
                }),
            }
        }
    }
    Ok(report)
}
