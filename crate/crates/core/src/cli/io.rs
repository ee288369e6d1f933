//! Wire formats and validated ingestion.
//!
//! Predictions, ground-truth boxes, masks and score grids are
//! newline-delimited JSON, one record per line. Labels and timelines are CSV
//! with a header row.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cohort::{ExamKind, ExamRecord, PathologyRecord, Timeline};
use crate::detect::{GridCandidate, ImageGeom, ScoreGrid, TripletCandidate};
use crate::error::{Error, Result};
use crate::geometry::{BBox2D, BreastKey, DetBox, ImageKey, Laterality, Mask, Modality, View};
use crate::metrics::GroundTruthBox;

/// A field-level problem found after a record parsed.
pub struct Invalid {
    pub field: String,
    pub message: String,
}

impl Invalid {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub trait Validate {
    fn check(&self) -> std::result::Result<(), Invalid>;
}

fn unit_interval(field: &str, v: f64) -> std::result::Result<(), Invalid> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Invalid::new(field, format!("{v} outside [0, 1]")))
    }
}

fn positive(field: &str, v: f64) -> std::result::Result<(), Invalid> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Invalid::new(field, format!("{v} must be finite and > 0")))
    }
}

fn finite(field: &str, v: f64) -> std::result::Result<(), Invalid> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Invalid::new(field, format!("{v} is not finite")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<u32>,
    pub s_m: f64,
    pub s_b: f64,
}

impl WireBox {
    pub fn from_det(b: &DetBox) -> Self {
        WireBox {
            cx: b.geom.cx,
            cy: b.geom.cy,
            w: b.geom.w,
            h: b.geom.h,
            slice: b.slice,
            s_m: b.score_malignant,
            s_b: b.score_benign,
        }
    }

    pub fn to_det(&self, origin: Modality) -> Result<DetBox> {
        let b = DetBox::new(
            BBox2D::new(self.cx, self.cy, self.w, self.h)?,
            self.s_m,
            self.s_b,
            origin,
        );
        Ok(match self.slice {
            Some(s) => b.with_slice(s),
            None => b,
        })
    }

    fn check(&self, i: usize) -> std::result::Result<(), Invalid> {
        let f = |name: &str| format!("boxes[{i}].{name}");
        finite(&f("cx"), self.cx)?;
        finite(&f("cy"), self.cy)?;
        positive(&f("w"), self.w)?;
        positive(&f("h"), self.h)?;
        unit_interval(&f("s_m"), self.s_m)?;
        unit_interval(&f("s_b"), self.s_b)
    }
}

/// Image-key fields shared by every per-image record.
macro_rules! image_key_fields {
    ($name:ident { $($(#[$m:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            pub patient_id: String,
            pub exam_id: String,
            pub laterality: Laterality,
            pub view: View,
            pub modality: Modality,
            pub image_id: String,
            $($(#[$m])* pub $field: $ty,)*
        }

        impl $name {
            pub fn key(&self) -> ImageKey {
                ImageKey {
                    patient_id: self.patient_id.clone(),
                    exam_id: self.exam_id.clone(),
                    laterality: self.laterality,
                    view: self.view,
                    modality: self.modality,
                    image_id: self.image_id.clone(),
                }
            }

            pub fn breast(&self) -> BreastKey {
                BreastKey {
                    exam_id: self.exam_id.clone(),
                    laterality: self.laterality,
                }
            }
        }
    };
}

image_key_fields!(PredictionRecord {
    model_id: String,
    image_scores: [f64; 2],
    boxes: Vec<WireBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_slices: Option<u32>,
});

impl PredictionRecord {
    pub fn with_key(key: &ImageKey, model_id: &str, image_scores: [f64; 2], boxes: Vec<WireBox>) -> Self {
        PredictionRecord {
            patient_id: key.patient_id.clone(),
            exam_id: key.exam_id.clone(),
            laterality: key.laterality,
            view: key.view,
            modality: key.modality,
            image_id: key.image_id.clone(),
            model_id: model_id.to_string(),
            image_scores,
            boxes,
            rows: None,
            cols: None,
            n_slices: None,
        }
    }

    pub fn det_boxes(&self) -> Result<Vec<DetBox>> {
        self.boxes.iter().map(|b| b.to_det(self.modality)).collect()
    }

    pub fn geom(&self) -> Option<ImageGeom> {
        Some(ImageGeom {
            rows: self.rows?,
            cols: self.cols?,
            n_slices: self.n_slices,
        })
    }
}

impl Validate for PredictionRecord {
    fn check(&self) -> std::result::Result<(), Invalid> {
        unit_interval("image_scores[0]", self.image_scores[0])?;
        unit_interval("image_scores[1]", self.image_scores[1])?;
        for (i, b) in self.boxes.iter().enumerate() {
            b.check(i)?;
            if let (Some(s), Some(n)) = (b.slice, self.n_slices) {
                if s >= n {
                    return Err(Invalid::new(
                        format!("boxes[{i}].slice"),
                        format!("{s} >= n_slices {n}"),
                    ));
                }
            }
            if self.modality == Modality::Dbt && b.slice.is_none() {
                return Err(Invalid::new(format!("boxes[{i}].slice"), "required for DBT boxes"));
            }
        }
        if self.modality == Modality::Dbt && self.n_slices.is_none() {
            return Err(Invalid::new("n_slices", "required for DBT images"));
        }
        Ok(())
    }
}

image_key_fields!(GtRecord {
    lesion_id: String,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice: Option<u32>,
});

impl GtRecord {
    pub fn to_gt(&self) -> Result<GroundTruthBox> {
        Ok(GroundTruthBox {
            geom: BBox2D::new(self.cx, self.cy, self.w, self.h)?,
            slice: self.slice,
            lesion_id: self.lesion_id.clone(),
            image: self.key(),
        })
    }
}

impl Validate for GtRecord {
    fn check(&self) -> std::result::Result<(), Invalid> {
        finite("cx", self.cx)?;
        finite("cy", self.cy)?;
        positive("w", self.w)?;
        positive("h", self.h)?;
        if self.modality == Modality::Dbt && self.slice.is_none() {
            return Err(Invalid::new("slice", "required for DBT ground truth"));
        }
        Ok(())
    }
}

image_key_fields!(MaskRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    acquisition_id: Option<String>,
    rows: usize,
    cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_slices: Option<u32>,
    /// Row-major run lengths alternating background and foreground,
    /// starting with background.
    rle: Vec<usize>,
});

impl MaskRecord {
    pub fn mask(&self) -> Result<Mask> {
        let mut bits = Vec::with_capacity(self.rows * self.cols);
        for (i, &run) in self.rle.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run));
        }
        Mask::from_bits(self.rows, self.cols, bits)
    }

    pub fn encode(mask: &Mask) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in mask.bits() {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn candidate(&self) -> Result<TripletCandidate> {
        Ok(TripletCandidate {
            key: self.key(),
            geom: ImageGeom::new(self.rows, self.cols, self.n_slices)?,
            mask: self.mask()?,
            acquisition_id: self.acquisition_id.clone(),
        })
    }
}

impl Validate for MaskRecord {
    fn check(&self) -> std::result::Result<(), Invalid> {
        let total: usize = self.rle.iter().sum();
        if total != self.rows * self.cols {
            return Err(Invalid::new(
                "rle",
                format!("runs cover {total} pixels, expected {}", self.rows * self.cols),
            ));
        }
        Ok(())
    }
}

/// One cell of a score grid: box geometry, per-target probabilities,
/// objectness, and optionally the classification-branch feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub c_m: f64,
    pub c_b: f64,
    pub o: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
}

image_key_fields!(GridRecord {
    model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice: Option<u32>,
    grid_h: usize,
    grid_w: usize,
    cells: Vec<GridCell>,
});

impl GridRecord {
    /// Fused probabilities `C * O` over the cell boxes.
    pub fn score_grid(&self) -> Result<ScoreGrid> {
        let cells = self
            .cells
            .iter()
            .map(|c| {
                Ok(GridCandidate {
                    geom: BBox2D::new(c.cx, c.cy, c.w, c.h)?,
                    score_malignant: c.c_m * c.o,
                    score_benign: c.c_b * c.o,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreGrid::new(self.grid_h, self.grid_w, cells)
    }
}

impl Validate for GridRecord {
    fn check(&self) -> std::result::Result<(), Invalid> {
        if self.cells.len() != self.grid_h * self.grid_w {
            return Err(Invalid::new(
                "cells",
                format!("{} cells for a {}x{} grid", self.cells.len(), self.grid_h, self.grid_w),
            ));
        }
        let dim = self.cells.first().map_or(0, |c| c.features.len());
        for (i, c) in self.cells.iter().enumerate() {
            let f = |name: &str| format!("cells[{i}].{name}");
            finite(&f("cx"), c.cx)?;
            finite(&f("cy"), c.cy)?;
            positive(&f("w"), c.w)?;
            positive(&f("h"), c.h)?;
            unit_interval(&f("c_m"), c.c_m)?;
            unit_interval(&f("c_b"), c.c_b)?;
            unit_interval(&f("o"), c.o)?;
            if c.features.len() != dim {
                return Err(Invalid::new(
                    f("features"),
                    format!("length {} differs from {dim}", c.features.len()),
                ));
            }
        }
        if self.modality == Modality::Dbt && self.slice.is_none() {
            return Err(Invalid::new("slice", "required for DBT grids"));
        }
        Ok(())
    }
}

/// Breast-level labels, one row per breast.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRow {
    pub exam_id: String,
    pub laterality: Laterality,
    pub malignant: u8,
    pub benign: u8,
    /// Whether the radiologist recalled the exam.
    #[serde(default)]
    pub recalled: Option<u8>,
}

impl LabelRow {
    pub fn breast(&self) -> BreastKey {
        BreastKey {
            exam_id: self.exam_id.clone(),
            laterality: self.laterality,
        }
    }
}

impl Validate for LabelRow {
    fn check(&self) -> std::result::Result<(), Invalid> {
        for (name, v) in [
            ("malignant", Some(self.malignant)),
            ("benign", Some(self.benign)),
            ("recalled", self.recalled),
        ] {
            if let Some(v) = v {
                if v > 1 {
                    return Err(Invalid::new(name, format!("{v} is not 0 or 1")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordType {
    Exam,
    Pathology,
}

/// One timeline CSV row; exam and pathology records share the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineRow {
    pub record_type: RecordType,
    pub patient_id: String,
    pub date: NaiveDate,
    #[serde(default)]
    pub exam_id: Option<String>,
    #[serde(default)]
    pub kind: Option<ExamKind>,
    #[serde(default)]
    pub birads: Option<u8>,
    #[serde(default)]
    pub occult_left: Option<u8>,
    #[serde(default)]
    pub occult_right: Option<u8>,
    #[serde(default)]
    pub laterality: Option<Laterality>,
    #[serde(default)]
    pub malignant: Option<u8>,
    #[serde(default)]
    pub benign: Option<u8>,
}

impl TimelineRow {
    pub fn from_exam(e: &ExamRecord) -> Self {
        TimelineRow {
            record_type: RecordType::Exam,
            patient_id: e.patient_id.clone(),
            date: e.date,
            exam_id: Some(e.exam_id.clone()),
            kind: Some(e.kind),
            birads: e.birads,
            occult_left: Some(e.occult_left as u8),
            occult_right: Some(e.occult_right as u8),
            laterality: None,
            malignant: None,
            benign: None,
        }
    }

    pub fn from_pathology(p: &PathologyRecord) -> Self {
        TimelineRow {
            record_type: RecordType::Pathology,
            patient_id: p.patient_id.clone(),
            date: p.date,
            exam_id: None,
            kind: None,
            birads: None,
            occult_left: None,
            occult_right: None,
            laterality: Some(p.laterality),
            malignant: Some(p.malignant as u8),
            benign: Some(p.benign as u8),
        }
    }
}

impl Validate for TimelineRow {
    fn check(&self) -> std::result::Result<(), Invalid> {
        let flag = |name: &str, v: Option<u8>| match v {
            Some(v) if v > 1 => Err(Invalid::new(name, format!("{v} is not 0 or 1"))),
            _ => Ok(()),
        };
        flag("occult_left", self.occult_left)?;
        flag("occult_right", self.occult_right)?;
        flag("malignant", self.malignant)?;
        flag("benign", self.benign)?;
        match self.record_type {
            RecordType::Exam => {
                if self.exam_id.is_none() {
                    return Err(Invalid::new("exam_id", "required for exam rows"));
                }
                if self.kind.is_none() {
                    return Err(Invalid::new("kind", "required for exam rows"));
                }
                if let Some(b) = self.birads {
                    if b > 6 {
                        return Err(Invalid::new("birads", format!("{b} outside 0-6")));
                    }
                }
            }
            RecordType::Pathology => {
                if self.laterality.is_none() {
                    return Err(Invalid::new("laterality", "required for pathology rows"));
                }
                if self.malignant.unwrap_or(0) + self.benign.unwrap_or(0) == 0 {
                    return Err(Invalid::new("malignant", "pathology rows need malignant or benign set"));
                }
            }
        }
        Ok(())
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn validated<T: Validate>(path: &Path, line: usize, rec: T) -> Result<T> {
    rec.check().map_err(|e| Error::Validation {
        path: path_str(path),
        line,
        field: e.field,
        message: e.message,
    })?;
    Ok(rec)
}

/// Parse and validate newline-delimited JSON; blank lines are skipped.
pub fn read_ndjson<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path_str(path),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(validated(path, i + 1, rec)?);
    }
    Ok(out)
}

/// Parse and validate a CSV file with headers.
pub fn read_csv<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let parse_err = |line: usize, column: usize, e: &csv::Error| Error::Parse {
        path: path_str(path),
        line,
        column,
        message: e.to_string(),
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 0, &e)
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let rec: T = row.deserialize(Some(&headers)).map_err(|e| {
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field().map_or(0, |f| f as usize + 1),
                _ => 0,
            };
            parse_err(line, column, &e)
        })?;
        out.push(validated(path, line, rec)?);
    }
    Ok(out)
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_ndjson<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn to_csv<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_ndjson(records)?)
}

pub fn write_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &to_csv(records)?)
}

/// Predictions keyed uniquely by `(model_id, image_id)`.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let recs: Vec<PredictionRecord> = read_ndjson(path)?;
    let mut seen = HashSet::new();
    for (i, r) in recs.iter().enumerate() {
        if !seen.insert((r.model_id.as_str(), r.image_id.as_str())) {
            return Err(Error::Validation {
                path: path_str(path),
                line: i + 1,
                field: "image_id".into(),
                message: format!("duplicate image {} for model {}", r.image_id, r.model_id),
            });
        }
    }
    Ok(recs)
}

pub fn read_gt(path: &Path) -> Result<Vec<GtRecord>> {
    read_ndjson(path)
}

pub fn read_masks(path: &Path) -> Result<Vec<MaskRecord>> {
    let recs: Vec<MaskRecord> = read_ndjson(path)?;
    let mut seen = HashSet::new();
    for (i, r) in recs.iter().enumerate() {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::Validation {
                path: path_str(path),
                line: i + 1,
                field: "image_id".into(),
                message: format!("duplicate image {}", r.image_id),
            });
        }
    }
    Ok(recs)
}

pub fn read_grids(path: &Path) -> Result<Vec<GridRecord>> {
    read_ndjson(path)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let rows: Vec<LabelRow> = read_csv(path)?;
    let mut seen = HashSet::new();
    for (i, r) in rows.iter().enumerate() {
        if !seen.insert(r.breast()) {
            return Err(Error::Validation {
                path: path_str(path),
                line: i + 2,
                field: "laterality".into(),
                message: format!("duplicate breast {}", r.breast()),
            });
        }
    }
    Ok(rows)
}

pub fn read_timeline(path: &Path) -> Result<Timeline> {
    let rows: Vec<TimelineRow> = read_csv(path)?;
    timeline_from_rows(&rows)
}

pub fn timeline_from_rows(rows: &[TimelineRow]) -> Result<Timeline> {
    let mut t = Timeline::default();
    for r in rows {
        match r.record_type {
            RecordType::Exam => t.exams.push(ExamRecord {
                exam_id: r.exam_id.clone().unwrap_or_default(),
                patient_id: r.patient_id.clone(),
                date: r.date,
                kind: r.kind.unwrap_or(ExamKind::OtherBreastImaging),
                birads: r.birads,
                occult_left: r.occult_left == Some(1),
                occult_right: r.occult_right == Some(1),
            }),
            RecordType::Pathology => t.pathology.push(PathologyRecord {
                patient_id: r.patient_id.clone(),
                date: r.date,
                laterality: r.laterality.unwrap_or(Laterality::Left),
                malignant: r.malignant == Some(1),
                benign: r.benign == Some(1),
            }),
        }
    }
    Ok(t)
}

/// Schema selector for [`ingest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Predictions,
    Labels,
    GtBoxes,
    Timeline,
    Masks,
    Grids,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Predictions(Vec<PredictionRecord>),
    Labels(Vec<LabelRow>),
    GtBoxes(Vec<GtRecord>),
    Timeline(Timeline),
    Masks(Vec<MaskRecord>),
    Grids(Vec<GridRecord>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Predictions(v) => v.len(),
            Dataset::Labels(v) => v.len(),
            Dataset::GtBoxes(v) => v.len(),
            Dataset::Timeline(t) => t.exams.len() + t.pathology.len(),
            Dataset::Masks(v) => v.len(),
            Dataset::Grids(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn ingest(path: &Path, schema: Schema) -> Result<Dataset> {
    Ok(match schema {
        Schema::Predictions => Dataset::Predictions(read_predictions(path)?),
        Schema::Labels => Dataset::Labels(read_labels(path)?),
        Schema::GtBoxes => Dataset::GtBoxes(read_gt(path)?),
        Schema::Timeline => Dataset::Timeline(read_timeline(path)?),
        Schema::Masks => Dataset::Masks(read_masks(path)?),
        Schema::Grids => Dataset::Grids(read_grids(path)?),
    })
}
