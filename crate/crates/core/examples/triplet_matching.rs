//! Pair FFDM, C-View and DBT images of one view by comparing breast
//! foreground masks.

use mammoscreen::detect::{match_triplets, ImageGeom, TripletCandidate};
use mammoscreen::{ImageKey, Laterality, Mask, Modality, View};

fn candidate(id: &str, modality: Modality, mask: Mask, acquisition: Option<&str>) -> TripletCandidate {
    TripletCandidate {
        key: ImageKey {
            patient_id: "pt1".into(),
            exam_id: "ex1".into(),
            laterality: Laterality::Right,
            view: View::MLO,
            modality,
            image_id: id.into(),
        },
        geom: ImageGeom::planar(mask.rows(), mask.cols()),
        mask,
        acquisition_id: acquisition.map(String::from),
    }
}

/// Half-ellipse breast outline hugging the left edge.
fn breast(rows: usize, cols: usize, depth: f64) -> Mask {
    Mask::from_fn(rows, cols, |r, c| {
        let y = (r as f64 + 0.5) / rows as f64 * 2.0 - 1.0;
        let x = (c as f64 + 0.5) / (depth * cols as f64);
        x * x + y * y <= 1.0
    })
}

fn main() -> mammoscreen::Result<()> {
    let images = vec![
        candidate("ffdm-a", Modality::Ffdm, breast(1200, 960, 0.62), None),
        candidate("ffdm-b", Modality::Ffdm, breast(1200, 960, 0.45), None),
        candidate("cview", Modality::Cview, breast(600, 480, 0.62), Some("acq-7")),
        candidate("dbt", Modality::Dbt, Mask::new(600, 480), Some("acq-7")),
    ];
    let report = match_triplets(&images)?;
    for m in &report.matches {
        println!(
            "{} + {} + {} (IoU {:.5})",
            m.ffdm.image_id, m.cview.image_id, m.dbt.image_id, m.iou
        );
    }
    for w in &report.warnings {
        println!("warning for {}: {}", w.image_id, w.message);
    }
    Ok(())
}
