//! Lesion- and breast-level FROC on a handful of images, including a DBT
//! volume where slice distance matters.

use mammoscreen::metrics::{aufroc1, froc, sensitivity_at_fp, EvalImage, FrocLevel, GroundTruthBox};
use mammoscreen::{BBox2D, DetBox, ImageKey, Laterality, Modality, View};

fn key(exam: &str, lat: Laterality, modality: Modality) -> ImageKey {
    ImageKey {
        patient_id: format!("pt-{exam}"),
        exam_id: exam.into(),
        laterality: lat,
        view: View::CC,
        modality,
        image_id: format!("{exam}-{lat}-{modality}"),
    }
}

fn main() -> mammoscreen::Result<()> {
    let a = key("ex1", Laterality::Left, Modality::Ffdm);
    let b = key("ex1", Laterality::Right, Modality::Ffdm);
    let v = key("ex2", Laterality::Left, Modality::Dbt);
    let lesion = |image: &ImageKey, cx: f64, cy: f64, slice: Option<u32>, id: &str| GroundTruthBox {
        geom: BBox2D::new(cx, cy, 60.0, 50.0).unwrap(),
        slice,
        lesion_id: id.into(),
        image: image.clone(),
    };
    let gts = vec![
        lesion(&a, 400.0, 600.0, None, "a1"),
        lesion(&a, 900.0, 200.0, None, "a2"),
        lesion(&v, 500.0, 500.0, Some(30), "v1"),
    ];
    let det = |cx: f64, cy: f64, s: f64, m: Modality| DetBox::new(BBox2D::new(cx, cy, 55.0, 55.0).unwrap(), s, 0.0, m);
    let images = vec![
        EvalImage {
            key: a,
            n_slices: None,
            predictions: vec![
                det(420.0, 610.0, 0.9, Modality::Ffdm),
                det(1500.0, 1500.0, 0.6, Modality::Ffdm),
            ],
        },
        EvalImage {
            key: b,
            n_slices: None,
            predictions: vec![det(300.0, 300.0, 0.7, Modality::Ffdm)],
        },
        EvalImage {
            key: v,
            n_slices: Some(60),
            // 12 slices away from the lesion: within a quarter of the stack.
            predictions: vec![det(510.0, 490.0, 0.8, Modality::Dbt).with_slice(42)],
        },
    ];

    for level in [FrocLevel::Lesion, FrocLevel::Breast] {
        let curve = froc(&images, &gts, level)?;
        println!("{level:?} level:");
        for p in &curve.points {
            println!(
                "  threshold {:?}  FP/image {:.3}  sensitivity {:.3}",
                p.threshold, p.fp_per_image, p.sensitivity
            );
        }
        println!(
            "  AUFROC_1 {:.4}, sensitivity at 0.5 FP/image {:.3}",
            aufroc1(&curve),
            sensitivity_at_fp(&curve, 0.5)
        );
    }
    Ok(())
}
