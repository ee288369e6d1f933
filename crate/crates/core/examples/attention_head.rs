//! Fuse classification and localization maps, select the top-K boxes and
//! run the gated-attention image head.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use mammoscreen::head::{
    fuse_scores, fused_grid, predict_2d, AttentionParams, FeatureGrid, HeadParams, ImageHead, TopKConfig,
};
use mammoscreen::rng::seeded;
use mammoscreen::{BBox2D, Modality};

fn main() -> mammoscreen::Result<()> {
    let mut rng = seeded(42);
    let (h, w, dim, l) = (6, 4, 8, 4);

    let c = Array3::from_shape_fn((h, w, 2), |_| rng.random_range(0.0..1.0));
    let o = Array3::from_shape_fn((h, w, 1), |_| rng.random_range(0.5..1.0));
    let geometry: Vec<BBox2D> = (0..h * w)
        .map(|i| {
            let (r, col) = ((i / w) as f64, (i % w) as f64);
            BBox2D::new(32.0 * col + 16.0, 32.0 * r + 16.0, 28.0, 28.0).unwrap()
        })
        .collect();
    let grid = fused_grid(&fuse_scores(&c, &o)?, &geometry)?;
    let features = FeatureGrid::new(Array3::from_shape_fn((h, w, dim), |_| rng.random_range(-1.0..1.0)))?;

    let attention = AttentionParams::new(
        Array1::from_shape_fn(l, |_| rng.random_range(-1.0..1.0)),
        Array2::from_shape_fn((l, dim), |_| rng.random_range(-0.5..0.5)),
        Array2::from_shape_fn((l, dim), |_| rng.random_range(-0.5..0.5)),
    )?;
    let head = ImageHead::new(
        attention,
        HeadParams::new(Array2::from_shape_fn((dim, 2), |_| rng.random_range(-1.0..1.0)))?,
    )?;

    let cfg = TopKConfig {
        k: 5,
        nms_threshold: 0.5,
        include_global_pool: true,
    };
    let out = predict_2d(&grid, Modality::Ffdm, &features, &cfg, &head)?;
    for (b, a) in out.topk.boxes.iter().zip(&out.alpha) {
        println!(
            "cell {:?} score {:.3} attention {:.3}",
            b.source_anchor.unwrap(),
            b.score_malignant,
            a
        );
    }
    let pooled: f64 = out.alpha[out.topk.boxes.len()..].iter().sum();
    println!("pooled vectors carry {pooled:.3} of the attention");
    println!(
        "y_malignant {:.4}  y_benign {:.4}",
        out.prediction.y_malignant, out.prediction.y_benign
    );
    Ok(())
}
