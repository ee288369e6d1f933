//! Pool FFDM, C-View and DBT boxes in C-View space and recover a display
//! slice for every box that overlaps a DBT detection.

use std::collections::BTreeMap;

use mammoscreen::detect::{ensemble_boxes_multimodal, to_shared_space, ImageGeom};
use mammoscreen::{BBox2D, DetBox, Modality, Target};

fn main() -> mammoscreen::Result<()> {
    let ffdm_geom = ImageGeom::planar(4096, 3328);
    let cview_geom = ImageGeom::planar(2457, 1996);

    let ffdm = vec![DetBox::new(
        BBox2D::new(1000.0, 1200.0, 120.0, 100.0)?,
        0.88,
        0.1,
        Modality::Ffdm,
    )];
    let cview = vec![
        DetBox::new(BBox2D::new(602.0, 718.0, 70.0, 62.0)?, 0.74, 0.1, Modality::Cview),
        DetBox::new(BBox2D::new(1500.0, 300.0, 50.0, 50.0)?, 0.31, 0.2, Modality::Cview),
    ];
    let dbt = vec![DetBox::new(BBox2D::new(598.0, 722.0, 66.0, 60.0)?, 0.69, 0.1, Modality::Dbt).with_slice(23)];

    let mut per_modality = BTreeMap::new();
    per_modality.insert(Modality::Ffdm, to_shared_space(&ffdm, &ffdm_geom, &cview_geom));
    per_modality.insert(Modality::Cview, cview);
    per_modality.insert(Modality::Dbt, dbt);

    let out = ensemble_boxes_multimodal(&per_modality, Target::Malignant);
    println!("unified boxes:");
    for b in &out.unified {
        println!(
            "  {} score {:.2} at ({:.0}, {:.0})",
            b.origin, b.score_malignant, b.geom.cx, b.geom.cy
        );
    }
    println!("shown on DBT:");
    for b in &out.dbt_displayable {
        println!(
            "  {} score {:.2} on slice {}",
            b.origin,
            b.score_malignant,
            b.slice.unwrap()
        );
    }
    Ok(())
}
