//! Synthetic screening datasets with planted lesions.
//!
//! Each exam has both breasts, CC and MLO views, and one image per enabled
//! modality. C-View and DBT share a resolution; FFDM is exactly twice as
//! large, so FFDM masks downsample onto the C-View grid without loss and
//! every view triplet matches. Scenario patients with fixed timelines cover
//! each exclusion rule and its boundary.

use std::path::Path;

use chrono::{Days, Months, NaiveDate};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cli::io::{
    write_csv, write_ndjson, GridCell, GridRecord, GtRecord, LabelRow, MaskRecord, PredictionRecord, TimelineRow,
    WireBox,
};
use crate::cohort::{ExamKind, ExamRecord, PathologyRecord};
use crate::error::{Error, Result};
use crate::geometry::{ImageKey, Laterality, Mask, Modality, View};
use crate::head::{AttentionParams, HeadParams, ImageHead};
use crate::rng::substream;

/// C-View and DBT resolution, `(rows, cols)`.
pub const CVIEW_SHAPE: (usize, usize) = (320, 260);
pub const FFDM_SHAPE: (usize, usize) = (640, 520);
/// Score-grid shape, `(rows, cols)`, shared by every modality.
pub const GRID_SHAPE: (usize, usize) = (8, 6);
const ATTENTION_L: usize = 4;
const BACKGROUND_BOXES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_exams: usize,
    /// Per-breast probability of a malignant finding. Benign findings occur
    /// at half this rate among the remaining breasts.
    pub prevalence: f64,
    pub modalities: Vec<Modality>,
    /// Lesion side length range in C-View pixels.
    pub lesion_size: (f64, f64),
    pub models_per_modality: usize,
    pub n_slices: u32,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_exams: 16,
            prevalence: 0.25,
            modalities: Modality::ALL.to_vec(),
            lesion_size: (12.0, 36.0),
            models_per_modality: 2,
            n_slices: 6,
            feature_dim: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::Config(format!("prevalence {} outside [0, 1]", self.prevalence)));
        }
        let (lo, hi) = self.lesion_size;
        if !(lo > 0.0 && lo <= hi && hi <= 80.0) {
            return Err(Error::Config(format!(
                "lesion size range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 80"
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.n_slices < 3 {
            return Err(Error::Config("DBT stacks need at least 3 slices".into()));
        }
        if self.models_per_modality == 0 || self.feature_dim < 2 {
            return Err(Error::Config(
                "need at least one model per modality and two feature dims".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthDataset {
    pub predictions: Vec<PredictionRecord>,
    pub gt: Vec<GtRecord>,
    pub labels: Vec<LabelRow>,
    pub timeline: Vec<TimelineRow>,
    pub masks: Vec<MaskRecord>,
    pub grids: Vec<GridRecord>,
    pub head: Option<ImageHead>,
}

pub const PREDICTIONS_FILE: &str = "predictions.ndjson";
pub const GT_FILE: &str = "gt_boxes.ndjson";
pub const LABELS_FILE: &str = "labels.csv";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const MASKS_FILE: &str = "masks.ndjson";
pub const GRIDS_FILE: &str = "grids.ndjson";
pub const HEAD_FILE: &str = "head.json";

impl SynthDataset {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_ndjson(&dir.join(PREDICTIONS_FILE), &self.predictions)?;
        write_ndjson(&dir.join(GT_FILE), &self.gt)?;
        write_csv(&dir.join(LABELS_FILE), &self.labels)?;
        write_csv(&dir.join(TIMELINE_FILE), &self.timeline)?;
        write_ndjson(&dir.join(MASKS_FILE), &self.masks)?;
        write_ndjson(&dir.join(GRIDS_FILE), &self.grids)?;
        if let Some(h) = &self.head {
            crate::cli::io::write_atomic(&dir.join(HEAD_FILE), serde_json::to_string(h)?.as_bytes())?;
        }
        Ok(())
    }
}

/// Six decimals keep files compact and diff-friendly.
fn r6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn modality_tag(m: Modality) -> &'static str {
    match m {
        Modality::Ffdm => "ffdm",
        Modality::Cview => "cview",
        Modality::Dbt => "dbt",
    }
}

fn view_tag(v: View) -> String {
    format!("{v:?}")
}

/// Planted lesion in C-View coordinates.
#[derive(Debug, Clone)]
struct Lesion {
    id: String,
    malignant: bool,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    slice: u32,
}

/// Half-ellipse breast outline against the chest wall.
#[derive(Debug, Clone, Copy)]
struct Outline {
    laterality: Laterality,
    center_row: f64,
    semi_rows: f64,
    semi_cols: f64,
}

impl Outline {
    fn sample(rng: &mut ChaCha8Rng, laterality: Laterality) -> Self {
        Outline {
            laterality,
            center_row: CVIEW_SHAPE.0 as f64 / 2.0 + rng.random_range(-8.0..8.0),
            semi_rows: rng.random_range(125.0..145.0),
            semi_cols: rng.random_range(190.0..235.0),
        }
    }

    /// Distance from the chest wall for a column.
    fn depth(&self, col: f64) -> f64 {
        match self.laterality {
            Laterality::Left => col,
            Laterality::Right => CVIEW_SHAPE.1 as f64 - col,
        }
    }

    fn col_at_depth(&self, depth: f64) -> f64 {
        match self.laterality {
            Laterality::Left => depth,
            Laterality::Right => CVIEW_SHAPE.1 as f64 - depth,
        }
    }

    fn mask(&self) -> Mask {
        Mask::from_fn(CVIEW_SHAPE.0, CVIEW_SHAPE.1, |r, c| {
            let dr = (r as f64 + 0.5 - self.center_row) / self.semi_rows;
            let dc = self.depth(c as f64 + 0.5) / self.semi_cols;
            dr * dr + dc * dc <= 1.0
        })
    }

    fn lesion_center(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let cy = self.center_row + rng.random_range(-0.45..0.45) * self.semi_rows;
        let cx = self.col_at_depth(rng.random_range(0.2..0.55) * self.semi_cols);
        (cx, cy)
    }
}

fn shape_of(m: Modality) -> (usize, usize) {
    if m == Modality::Ffdm {
        FFDM_SHAPE
    } else {
        CVIEW_SHAPE
    }
}

fn scale_of(m: Modality) -> f64 {
    shape_of(m).0 as f64 / CVIEW_SHAPE.0 as f64
}

struct ImageSpec {
    key: ImageKey,
    acquisition_id: String,
    outline: Outline,
    lesions: Vec<Lesion>,
}

/// Generate a full dataset; identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut ds = SynthDataset::default();
    let base = NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date");
    let mut modalities = cfg.modalities.clone();
    modalities.sort();
    modalities.dedup();

    for i in 0..cfg.n_exams {
        let mut rng = substream(cfg.seed, i as u64);
        let exam_id = format!("ex{i:04}");
        let patient_id = format!("pt{i:04}");
        let date = base + Days::new(3 * i as u64);
        let mut exam_positive = false;
        let mut breast_specs = Vec::new();
        let mut pathology = Vec::new();
        for lat in Laterality::BOTH {
            let malignant = rng.random_bool(cfg.prevalence);
            let benign = !malignant && rng.random_bool(cfg.prevalence / 2.0);
            exam_positive |= malignant || benign;
            breast_specs.push((lat, malignant, benign));
            if malignant || benign {
                pathology.push(TimelineRow::from_pathology(&PathologyRecord {
                    patient_id: patient_id.clone(),
                    date: date + Days::new(30),
                    laterality: lat,
                    malignant,
                    benign,
                }));
            }
        }
        ds.timeline.push(TimelineRow::from_exam(&ExamRecord {
            exam_id: exam_id.clone(),
            patient_id: patient_id.clone(),
            date,
            kind: ExamKind::ScreeningMammo,
            birads: Some(if exam_positive { 0 } else { 1 }),
            occult_left: false,
            occult_right: false,
        }));
        ds.timeline.extend(pathology);

        for &(lat, malignant, benign) in &breast_specs {
            ds.labels.push(LabelRow {
                exam_id: exam_id.clone(),
                laterality: lat,
                malignant: malignant as u8,
                benign: benign as u8,
                recalled: Some(exam_positive as u8),
            });
            let n_malignant = if malignant {
                1 + rng.random_bool(0.3) as usize
            } else {
                0
            };
            for view in [View::CC, View::MLO] {
                let outline = Outline::sample(&mut rng, lat);
                let mut lesions = Vec::new();
                let kinds = (0..n_malignant)
                    .map(|k| (format!("m{}", k + 1), true))
                    .chain(benign.then(|| ("b1".to_string(), false)));
                for (id, is_malignant) in kinds {
                    let (cx, cy) = outline.lesion_center(&mut rng);
                    let side = rng.random_range(cfg.lesion_size.0..=cfg.lesion_size.1);
                    let aspect: f64 = rng.random_range(0.8..1.25);
                    lesions.push(Lesion {
                        id,
                        malignant: is_malignant,
                        cx,
                        cy,
                        w: side * aspect.sqrt(),
                        h: side / aspect.sqrt(),
                        slice: rng.random_range(1..cfg.n_slices - 1),
                    });
                }
                let lat_tag = if lat == Laterality::Left { "L" } else { "R" };
                for &m in &modalities {
                    let key = ImageKey {
                        patient_id: patient_id.clone(),
                        exam_id: exam_id.clone(),
                        laterality: lat,
                        view,
                        modality: m,
                        image_id: format!("{exam_id}-{lat_tag}{}-{}", view_tag(view), modality_tag(m)),
                    };
                    let spec = ImageSpec {
                        key,
                        acquisition_id: format!("{exam_id}-{lat_tag}{}-acq", view_tag(view)),
                        outline,
                        lesions: lesions.clone(),
                    };
                    emit_image(cfg, &spec, &mut rng, &mut ds);
                }
            }
        }
    }

    scenario_timelines(&mut ds.timeline);
    ds.head = Some(synth_head(cfg)?);
    Ok(ds)
}

fn emit_image(cfg: &SynthConfig, spec: &ImageSpec, rng: &mut ChaCha8Rng, ds: &mut SynthDataset) {
    let m = spec.key.modality;
    let (rows, cols) = shape_of(m);
    let s = scale_of(m);
    let n_slices = (m == Modality::Dbt).then_some(cfg.n_slices);
    let slice_of = |l: &Lesion| n_slices.map(|_| l.slice);

    let cview_mask = spec.outline.mask();
    let mask = cview_mask.resize_nearest(rows, cols);
    ds.masks.push(MaskRecord {
        patient_id: spec.key.patient_id.clone(),
        exam_id: spec.key.exam_id.clone(),
        laterality: spec.key.laterality,
        view: spec.key.view,
        modality: m,
        image_id: spec.key.image_id.clone(),
        acquisition_id: (m != Modality::Ffdm).then(|| spec.acquisition_id.clone()),
        rows,
        cols,
        n_slices,
        rle: MaskRecord::encode(&mask),
    });

    for l in spec.lesions.iter().filter(|l| l.malignant) {
        ds.gt.push(GtRecord {
            patient_id: spec.key.patient_id.clone(),
            exam_id: spec.key.exam_id.clone(),
            laterality: spec.key.laterality,
            view: spec.key.view,
            modality: m,
            image_id: spec.key.image_id.clone(),
            lesion_id: l.id.clone(),
            cx: r6(l.cx * s),
            cy: r6(l.cy * s),
            w: r6(l.w * s),
            h: r6(l.h * s),
            slice: slice_of(l),
        });
    }

    let has_malignant = spec.lesions.iter().any(|l| l.malignant);
    let has_benign = spec.lesions.iter().any(|l| !l.malignant);
    for model in 0..cfg.models_per_modality {
        let noise = 0.1 * model as f64;
        let mut boxes = Vec::new();
        for l in &spec.lesions {
            let (s_m, s_b) = if l.malignant {
                (rng.random_range(0.6..0.99), rng.random_range(0.05..0.4))
            } else {
                (rng.random_range(0.05..0.3), rng.random_range(0.6..0.95))
            };
            boxes.push(WireBox {
                cx: r6((l.cx + rng.random_range(-1.0..=1.0)) * s),
                cy: r6((l.cy + rng.random_range(-1.0..=1.0)) * s),
                w: r6(l.w * s),
                h: r6(l.h * s),
                slice: slice_of(l),
                s_m: r6(s_m),
                s_b: r6(s_b),
            });
        }
        for _ in 0..BACKGROUND_BOXES {
            let side = rng.random_range(10.0..30.0) * s;
            boxes.push(WireBox {
                cx: r6(rng.random_range(side..cols as f64 - side)),
                cy: r6(rng.random_range(side..rows as f64 - side)),
                w: r6(side),
                h: r6(side),
                slice: n_slices.map(|n| rng.random_range(0..n)),
                s_m: r6(rng.random_range(0.01..0.35 + noise)),
                s_b: r6(rng.random_range(0.01..0.35)),
            });
        }
        let y_m = if has_malignant {
            rng.random_range(0.35 - noise..0.97)
        } else {
            rng.random_range(0.02..0.7)
        };
        let y_b = if has_benign {
            rng.random_range(0.4..0.95)
        } else {
            rng.random_range(0.02..0.5)
        };
        let model_id = format!("{}-m{model}", modality_tag(m));
        let mut rec = PredictionRecord::with_key(&spec.key, &model_id, [r6(y_m), r6(y_b)], boxes);
        rec.rows = Some(rows);
        rec.cols = Some(cols);
        rec.n_slices = n_slices;
        ds.predictions.push(rec);

        if model == 0 {
            let slices: Vec<Option<u32>> = match n_slices {
                Some(n) => (0..n).map(Some).collect(),
                None => vec![None],
            };
            for slice in slices {
                ds.grids.push(grid_record(cfg, spec, &model_id, slice, rng));
            }
        }
    }
}

fn grid_record(
    cfg: &SynthConfig,
    spec: &ImageSpec,
    model_id: &str,
    slice: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> GridRecord {
    let m = spec.key.modality;
    let (rows, cols) = shape_of(m);
    let (gh, gw) = GRID_SHAPE;
    let ch = rows as f64 / gh as f64;
    let cw = cols as f64 / gw as f64;
    let s = scale_of(m);
    let planted = |gr: usize, gc: usize, malignant: bool| {
        spec.lesions.iter().any(|l| {
            l.malignant == malignant
                && ((l.cy * s) / ch).floor() as usize == gr
                && ((l.cx * s) / cw).floor() as usize == gc
                && slice.is_none_or(|z| z.abs_diff(l.slice) <= 1)
        })
    };
    let mut cells = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        for gc in 0..gw {
            let pm = planted(gr, gc, true);
            let pb = planted(gr, gc, false);
            let c_m = if pm {
                rng.random_range(0.85..0.95)
            } else {
                rng.random_range(0.02..0.12)
            };
            let c_b = if pb {
                rng.random_range(0.8..0.95)
            } else {
                rng.random_range(0.02..0.12)
            };
            let o = if pm || pb {
                rng.random_range(0.9..0.99)
            } else {
                rng.random_range(0.05..0.25)
            };
            let features = (0..cfg.feature_dim)
                .map(|d| {
                    let lift = if pm && d < cfg.feature_dim / 2 { 2.0 } else { 0.0 };
                    ((rng.random_range(-1.0..1.0) + lift) * 1e3f64).round() / 1e3
                })
                .collect();
            cells.push(GridCell {
                cx: r6((gc as f64 + 0.5) * cw),
                cy: r6((gr as f64 + 0.5) * ch),
                w: r6(cw),
                h: r6(ch),
                c_m: r6(c_m),
                c_b: r6(c_b),
                o: r6(o),
                features,
            });
        }
    }
    GridRecord {
        patient_id: spec.key.patient_id.clone(),
        exam_id: spec.key.exam_id.clone(),
        laterality: spec.key.laterality,
        view: spec.key.view,
        modality: m,
        image_id: spec.key.image_id.clone(),
        model_id: model_id.to_string(),
        slice,
        grid_h: gh,
        grid_w: gw,
        cells,
    }
}

/// Attention head whose malignant logit responds to the lifted feature dims.
fn synth_head(cfg: &SynthConfig) -> Result<ImageHead> {
    let mut rng = substream(cfg.seed, u64::MAX);
    let s = cfg.feature_dim;
    let w = Array1::from_shape_fn(ATTENTION_L, |_| r6(rng.random_range(-1.0..1.0)));
    let v = Array2::from_shape_fn((ATTENTION_L, s), |_| r6(rng.random_range(-0.5..0.5)));
    let u = Array2::from_shape_fn((ATTENTION_L, s), |_| r6(rng.random_range(-0.5..0.5)));
    let w_image = Array2::from_shape_fn((s, 2), |(d, t)| match (t, d < s / 2) {
        (0, true) => 0.5,
        (0, false) => -0.1,
        _ => r6(rng.random_range(-0.2..0.2)),
    });
    ImageHead::new(AttentionParams::new(w, v, u)?, HeadParams::new(w_image)?)
}

struct Scenario {
    id: &'static str,
    birads: u8,
    occult_left: bool,
    pathology: Option<(u64, bool)>,
    /// Other breast imaging: `(months, extra days, kind, birads)`.
    follow_up: Option<(u32, u64, ExamKind, u8)>,
}

/// Fixed timelines, one per exclusion rule plus boundary cases.
fn scenario_timelines(rows: &mut Vec<TimelineRow>) {
    let scenarios = [
        Scenario {
            id: "e1",
            birads: 4,
            occult_left: false,
            pathology: None,
            follow_up: None,
        },
        Scenario {
            id: "e2",
            birads: 1,
            occult_left: false,
            pathology: Some((120, true)),
            follow_up: None,
        },
        Scenario {
            id: "e3",
            birads: 2,
            occult_left: false,
            pathology: Some((10, false)),
            follow_up: None,
        },
        Scenario {
            id: "e4",
            birads: 0,
            occult_left: false,
            pathology: None,
            follow_up: None,
        },
        Scenario {
            id: "e4-ok",
            birads: 0,
            occult_left: false,
            pathology: None,
            follow_up: Some((4, 0, ExamKind::DiagnosticMammo, 2)),
        },
        Scenario {
            id: "e4-late",
            birads: 0,
            occult_left: false,
            pathology: None,
            follow_up: Some((6, 1, ExamKind::DiagnosticMammo, 2)),
        },
        Scenario {
            id: "e5",
            birads: 1,
            occult_left: false,
            pathology: None,
            follow_up: Some((11, 0, ExamKind::OtherBreastImaging, 1)),
        },
        Scenario {
            id: "e5-ok",
            birads: 1,
            occult_left: false,
            pathology: None,
            follow_up: Some((11, 1, ExamKind::ScreeningMammo, 1)),
        },
        Scenario {
            id: "occult",
            birads: 0,
            occult_left: true,
            pathology: Some((20, true)),
            follow_up: None,
        },
        Scenario {
            id: "path-late",
            birads: 1,
            occult_left: false,
            pathology: Some((121, true)),
            follow_up: None,
        },
    ];
    let date = NaiveDate::from_ymd_opt(2021, 3, 15).expect("valid date");
    for s in scenarios {
        let patient_id = format!("scn-{}", s.id);
        rows.push(TimelineRow::from_exam(&ExamRecord {
            exam_id: format!("scn-{}", s.id),
            patient_id: patient_id.clone(),
            date,
            kind: ExamKind::ScreeningMammo,
            birads: Some(s.birads),
            occult_left: s.occult_left,
            occult_right: false,
        }));
        if let Some((months, days, kind, birads)) = s.follow_up {
            rows.push(TimelineRow::from_exam(&ExamRecord {
                exam_id: format!("scn-{}-fu", s.id),
                patient_id: patient_id.clone(),
                date: date + Months::new(months) + Days::new(days),
                kind,
                birads: Some(birads),
                occult_left: false,
                occult_right: false,
            }));
        }
        if let Some((days, malignant)) = s.pathology {
            rows.push(TimelineRow::from_pathology(&PathologyRecord {
                patient_id,
                date: date + Days::new(days),
                laterality: Laterality::Left,
                malignant,
                benign: !malignant,
            }));
        }
    }
}
