//! Planar NMS on overlapping boxes, then Max-Slice-Selection on a small
//! tomosynthesis stack.

use mammoscreen::detect::{mss, nms, GridCandidate, ScoreGrid, SliceStack};
use mammoscreen::{BBox2D, DetBox, Modality, Target};

fn main() -> mammoscreen::Result<()> {
    let boxes = vec![
        DetBox::new(BBox2D::new(100.0, 100.0, 40.0, 40.0)?, 0.92, 0.10, Modality::Ffdm),
        DetBox::new(BBox2D::new(104.0, 98.0, 42.0, 38.0)?, 0.81, 0.20, Modality::Ffdm),
        DetBox::new(BBox2D::new(300.0, 220.0, 30.0, 30.0)?, 0.44, 0.05, Modality::Ffdm),
    ];
    println!("NMS at IoU 0.5:");
    for s in nms(&boxes, Target::Malignant, 0.5) {
        println!(
            "  keep score {:.2} at ({:.0}, {:.0}), suppressed {:?}",
            s.det.score_malignant, s.det.geom.cx, s.det.geom.cy, s.suppressed
        );
    }

    // A 2x2 grid over three slices. Each cell's best slice differs.
    let cell = |r: usize, c: usize, s_m: f64| GridCandidate {
        geom: BBox2D::from_corners(
            50.0 * c as f64,
            50.0 * r as f64,
            50.0 * c as f64 + 40.0,
            50.0 * r as f64 + 40.0,
        ),
        score_malignant: s_m,
        score_benign: 0.0,
    };
    let slices = [[0.1, 0.7, 0.2, 0.3], [0.8, 0.2, 0.2, 0.35], [0.3, 0.1, 0.6, 0.3]];
    let grids = slices
        .iter()
        .map(|s| ScoreGrid::new(2, 2, (0..4).map(|i| cell(i / 2, i % 2, s[i])).collect()))
        .collect::<mammoscreen::Result<Vec<_>>>()?;
    let stack = SliceStack::new(grids)?;
    println!("MSS over {} slices:", stack.n_slices());
    for b in mss(&stack, Target::Malignant, 0.5) {
        println!(
            "  slice {:?} cell {:?} score {:.2}",
            b.slice, b.source_anchor, b.score_malignant
        );
    }
    Ok(())
}
