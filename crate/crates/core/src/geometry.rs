//! Identifiers, box and mask geometry, and augmentation geometry.
//!
//! Boxes use continuous center/size coordinates in pixels. Pixel `(r, c)`
//! occupies the unit square `[c, c + 1) x [r, r + 1)`, so the tight box of a
//! set of pixels and the IoU of two boxes are exact.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Laterality {
    #[serde(rename = "L", alias = "Left", alias = "LEFT")]
    Left,
    #[serde(rename = "R", alias = "Right", alias = "RIGHT")]
    Right,
}

impl Laterality {
    pub const BOTH: [Laterality; 2] = [Laterality::Left, Laterality::Right];
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        })
    }
}

/// Mammographic view. Screening exams use CC and MLO only.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
    LM,
    ML,
    XCCL,
    XCC,
    TAN,
    XCCM,
    AT,
    RL,
    RM,
}

impl View {
    pub fn is_screening(self) -> bool {
        matches!(self, View::CC | View::MLO)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "FFDM")]
    Ffdm,
    #[serde(rename = "CVIEW", alias = "C-View", alias = "CView")]
    Cview,
    #[serde(rename = "DBT")]
    Dbt,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ffdm, Modality::Cview, Modality::Dbt];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ffdm => "FFDM",
            Modality::Cview => "CVIEW",
            Modality::Dbt => "DBT",
        })
    }
}

/// Which per-box probability drives ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Malignant,
    Benign,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageKey {
    pub patient_id: String,
    pub exam_id: String,
    pub laterality: Laterality,
    pub view: View,
    pub modality: Modality,
    pub image_id: String,
}

impl ImageKey {
    /// `(exam_id, laterality)`, the unit breast-level metrics aggregate over.
    pub fn breast(&self) -> BreastKey {
        BreastKey {
            exam_id: self.exam_id.clone(),
            laterality: self.laterality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BreastKey {
    pub exam_id: String,
    pub laterality: Laterality,
}

impl fmt::Display for BreastKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.exam_id, self.laterality)
    }
}

/// Axis-aligned box in center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox2D { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Box spanning `[x0, x1) x [y0, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox2D {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("box must have w > 0 and h > 0: {self:?}")));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        BBox2D {
            cx: self.cx * sx,
            cy: self.cy * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BBox2D {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

/// One bounding-box prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub geom: BBox2D,
    /// Slice index; present for DBT-origin boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<u32>,
    pub score_malignant: f64,
    pub score_benign: f64,
    pub origin: Modality,
    /// `(row, col)` of the feature-grid cell that produced the box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_anchor: Option<(usize, usize)>,
}

impl DetBox {
    pub fn new(geom: BBox2D, score_malignant: f64, score_benign: f64, origin: Modality) -> Self {
        DetBox {
            geom,
            slice: None,
            score_malignant,
            score_benign,
            origin,
            source_anchor: None,
        }
    }

    pub fn with_slice(mut self, slice: u32) -> Self {
        self.slice = Some(slice);
        self
    }

    pub fn with_anchor(mut self, row: usize, col: usize) -> Self {
        self.source_anchor = Some((row, col));
        self
    }

    pub fn score(&self, target: Target) -> f64 {
        match target {
            Target::Malignant => self.score_malignant,
            Target::Benign => self.score_benign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        for (name, s) in [
            ("score_malignant", self.score_malignant),
            ("score_benign", self.score_benign),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!("{name} = {s} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Intersection over union of two axis-aligned boxes.
///
/// A zero-area box has IoU 0 with everything, itself included.
pub fn iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_distance(a: &BBox2D, b: &BBox2D) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Dense binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask has {} bits, expected {rows} x {cols}",
                bits.len()
            )));
        }
        Ok(Mask { rows, cols, bits })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Mask { rows, cols, bits }
    }

    /// Mask with the half-open rectangle `[r0, r1) x [c0, c1)` set.
    pub fn rect(rows: usize, cols: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        Mask::from_fn(rows, cols, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Nearest-neighbor resize; output pixel centers sample the input grid.
    pub fn resize_nearest(&self, rows: usize, cols: usize) -> Mask {
        if rows == self.rows && cols == self.cols {
            return self.clone();
        }
        let row_src: Vec<usize> = (0..rows).map(|r| nearest_source(r, rows, self.rows)).collect();
        let col_src: Vec<usize> = (0..cols).map(|c| nearest_source(c, cols, self.cols)).collect();
        let mut out = Mask::new(rows, cols);
        for (r, &sr) in row_src.iter().enumerate() {
            let src_row = &self.bits[sr * self.cols..(sr + 1) * self.cols];
            let dst_row = &mut out.bits[r * cols..(r + 1) * cols];
            for (d, &sc) in dst_row.iter_mut().zip(&col_src) {
                *d = src_row[sc];
            }
        }
        out
    }

    /// 4-connected components as lists of `(row, col)` pixels, in row-major
    /// order of their first pixel.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let mut seen = vec![false; self.bits.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut comp = Vec::new();
            while let Some(idx) = queue.pop_front() {
                let (r, c) = (idx / self.cols, idx % self.cols);
                comp.push((r, c));
                let mut visit = |nr: usize, nc: usize| {
                    let n = nr * self.cols + nc;
                    if self.bits[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < self.rows {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < self.cols {
                    visit(r, c + 1);
                }
            }
            out.push(comp);
        }
        out
    }
}

fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// Tight box around a pixel set.
pub fn tight_box(pixels: &[(usize, usize)]) -> Option<BBox2D> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for &(r, c) in pixels {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    if pixels.is_empty() {
        return None;
    }
    Some(BBox2D::from_corners(
        c0 as f64,
        r0 as f64,
        (c1 + 1) as f64,
        (r1 + 1) as f64,
    ))
}

/// IoU restricted to one band of rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskIou {
    pub value: f64,
    /// False when the union inside the band is empty.
    pub valid: bool,
}

/// IoU over rows `[exclude_rows, rows - exclude_rows)`; rows outside the band
/// are ignored.
pub fn mask_iou(a: &Mask, b: &Mask, exclude_rows: usize) -> Result<MaskIou> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if 2 * exclude_rows >= a.rows {
        return Err(Error::invalid(format!(
            "cannot exclude {exclude_rows} rows at each edge of a {}-row mask",
            a.rows
        )));
    }
    let lo = exclude_rows * a.cols;
    let hi = (a.rows - exclude_rows) * a.cols;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits[lo..hi].iter().zip(&b.bits[lo..hi]) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(MaskIou {
            value: 0.0,
            valid: false,
        });
    }
    Ok(MaskIou {
        value: inter as f64 / union as f64,
        valid: true,
    })
}

/// Keep only the largest 4-connected component. Equal-size ties keep the
/// component whose first pixel comes first in row-major order.
pub fn largest_connected_component(m: &Mask) -> Mask {
    let (rows, cols) = (m.rows, m.cols);
    let mut label = vec![0u32; m.bits.len()];
    let mut sizes: Vec<usize> = vec![0];
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..m.bits.len() {
        if !m.bits[start] || label[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        label[start] = id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let (r, c) = (idx / cols, idx % cols);
            let neighbors = [
                (r > 0).then(|| idx - cols),
                (r + 1 < rows).then(|| idx + cols),
                (c > 0).then(|| idx - 1),
                (c + 1 < cols).then(|| idx + 1),
            ];
            for n in neighbors.into_iter().flatten() {
                if m.bits[n] && label[n] == 0 {
                    label[n] = id;
                    stack.push(n);
                }
            }
        }
        sizes.push(size);
    }
    let mut best = 0;
    for (id, &size) in sizes.iter().enumerate().skip(1) {
        if size > sizes[best] {
            best = id;
        }
    }
    let bits = if best == 0 {
        vec![false; m.bits.len()]
    } else {
        label.iter().map(|&l| l == best as u32).collect()
    };
    Mask { rows, cols, bits }
}

/// Random affine augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Translation as a fraction of (width, height).
    pub translate_frac: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
    pub hflip: bool,
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        translate_frac: (0.0, 0.0),
        scale: 1.0,
        shear_deg: 0.0,
        hflip: false,
    };

    pub const MAX_ROTATION_DEG: f64 = 15.0;
    pub const MAX_TRANSLATE_FRAC: f64 = 0.10;
    pub const SCALE_RANGE: (f64, f64) = (0.8, 1.6);
    pub const MAX_SHEAR_DEG: f64 = 25.0;
    pub const FLIP_PROBABILITY: f64 = 0.5;

    /// Draw parameters from the training augmentation ranges.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let t = Self::MAX_TRANSLATE_FRAC;
        AffineParams {
            rotation_deg: rng.random_range(-Self::MAX_ROTATION_DEG..=Self::MAX_ROTATION_DEG),
            translate_frac: (rng.random_range(-t..=t), rng.random_range(-t..=t)),
            scale: rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
            shear_deg: rng.random_range(-Self::MAX_SHEAR_DEG..=Self::MAX_SHEAR_DEG),
            hflip: rng.random_bool(Self::FLIP_PROBABILITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("affine scale must be > 0, got {}", self.scale)));
        }
        let finite = [
            self.rotation_deg,
            self.translate_frac.0,
            self.translate_frac.1,
            self.shear_deg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite affine parameter"));
        }
        Ok(())
    }

    /// Linear part `rotation * shear * scale` as a row-major 2x2 matrix.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let rs = [[c, c * k - s], [s, s * k + c]];
        [
            [rs[0][0] * self.scale, rs[0][1] * self.scale],
            [rs[1][0] * self.scale, rs[1][1] * self.scale],
        ]
    }
}

/// Apply an affine transform about the canvas center to a segmentation and
/// re-extract one tight box per surviving component.
///
/// Resampling is nearest-neighbor through the inverse map. Components are
/// tracked by label, so touching-after-transform components keep separate
/// boxes; components mapped fully off-canvas are dropped.
pub fn affine_augment(seg: &Mask, params: &AffineParams) -> Result<(Mask, Vec<BBox2D>)> {
    params.validate()?;
    let (rows, cols) = (seg.rows, seg.cols);
    let comps = seg.components();
    let mut labels = vec![0u32; rows * cols];
    for (i, comp) in comps.iter().enumerate() {
        for &(r, c) in comp {
            labels[r * cols + c] = i as u32 + 1;
        }
    }

    let m = params.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::invalid("affine transform is singular"));
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (ox, oy) = (cols as f64 / 2.0, rows as f64 / 2.0);
    let (tx, ty) = (
        params.translate_frac.0 * cols as f64,
        params.translate_frac.1 * rows as f64,
    );

    let mut out = Mask::new(rows, cols);
    let mut out_pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); comps.len()];
    for r in 0..rows {
        for c in 0..cols {
            let qx = c as f64 + 0.5 - ox - tx;
            let qy = r as f64 + 0.5 - oy - ty;
            let mut px = inv[0][0] * qx + inv[0][1] * qy;
            let py = inv[1][0] * qx + inv[1][1] * qy;
            if params.hflip {
                px = -px;
            }
            let sx = (px + ox).floor();
            let sy = (py + oy).floor();
            if sx < 0.0 || sy < 0.0 || sx >= cols as f64 || sy >= rows as f64 {
                continue;
            }
            let label = labels[sy as usize * cols + sx as usize];
            if label > 0 {
                out.set(r, c, true);
                out_pixels[label as usize - 1].push((r, c));
            }
        }
    }
    let boxes = out_pixels.iter().filter_map(|p| tight_box(p)).collect();
    Ok((out, boxes))
}

/// Fixed-size crop window, in pixels of the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: i64,
    pub left: i64,
    pub height: u32,
    pub width: u32,
}

impl CropWindow {
    /// FFDM input window (height x width).
    pub const FFDM: (u32, u32) = (2866, 1814);
    /// DBT and C-View input window (height x width).
    pub const DBT_CVIEW: (u32, u32) = (2166, 1339);

    pub fn new(top: i64, left: i64, height: u32, width: u32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("crop window must have positive size"));
        }
        Ok(CropWindow {
            top,
            left,
            height,
            width,
        })
    }

    /// Default window for a modality, anchored at the origin.
    pub fn for_modality(modality: Modality) -> Self {
        let (height, width) = match modality {
            Modality::Ffdm => Self::FFDM,
            Modality::Cview | Modality::Dbt => Self::DBT_CVIEW,
        };
        CropWindow {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    /// Re-express a box given in `self` coordinates in `inner` coordinates.
    pub fn box_into(&self, inner: &CropWindow, b: &BBox2D) -> BBox2D {
        b.translated((self.left - inner.left) as f64, (self.top - inner.top) as f64)
    }
}

pub const MAX_CROP_JITTER_PX: u32 = 100;
pub const CROP_SHRINK_RANGE_PX: (u32, u32) = (100, 200);

/// Box-label-safe crop augmentation: jitter the origin by up to `jitter_px`
/// per axis and shrink each side length by a uniform draw from
/// `shrink_range`. No rotation or shear, so box labels only translate.
pub fn simple_crop_augment<R: Rng + ?Sized>(
    window: &CropWindow,
    jitter_px: u32,
    shrink_range: (u32, u32),
    rng: &mut R,
) -> Result<CropWindow> {
    if jitter_px > MAX_CROP_JITTER_PX {
        return Err(Error::invalid(format!(
            "crop jitter {jitter_px} exceeds {MAX_CROP_JITTER_PX} px"
        )));
    }
    let (lo, hi) = shrink_range;
    if lo > hi {
        return Err(Error::invalid(format!("empty shrink range [{lo}, {hi}]")));
    }
    if hi >= window.height || hi >= window.width {
        return Err(Error::invalid(format!(
            "shrink up to {hi} px does not fit a {}x{} window",
            window.height, window.width
        )));
    }
    let j = jitter_px as i64;
    let dy = rng.random_range(-j..=j);
    let dx = rng.random_range(-j..=j);
    let shrink_h = rng.random_range(lo..=hi);
    let shrink_w = rng.random_range(lo..=hi);
    CropWindow::new(
        window.top + dy,
        window.left + dx,
        window.height - shrink_h,
        window.width - shrink_w,
    )
}
