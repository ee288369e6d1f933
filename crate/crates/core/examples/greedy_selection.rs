//! Greedy ensemble selection with modality alternation over six candidate
//! models of varying quality.

use std::collections::BTreeMap;

use rand::Rng;

use mammoscreen::ensemble::{greedy_select, BreastScore, ModelId, DEFAULT_ALTERNATION};
use mammoscreen::geometry::BreastKey;
use mammoscreen::rng::seeded;
use mammoscreen::{Laterality, Modality};

fn main() -> mammoscreen::Result<()> {
    let mut rng = seeded(3);
    let n = 300;
    let breasts: Vec<BreastKey> = (0..n)
        .map(|i| BreastKey {
            exam_id: format!("ex{:03}", i / 2),
            laterality: if i % 2 == 0 {
                Laterality::Left
            } else {
                Laterality::Right
            },
        })
        .collect();
    let labels: BTreeMap<BreastKey, bool> = breasts.iter().map(|b| (b.clone(), rng.random_bool(0.15))).collect();

    let mut candidates = Vec::new();
    for (modality, signal) in [
        (Modality::Ffdm, [0.45, 0.2]),
        (Modality::Cview, [0.35, 0.15]),
        (Modality::Dbt, [0.4, 0.3]),
    ] {
        for (v, s) in signal.iter().enumerate() {
            let id = format!("{modality}-{v}");
            let scores = breasts
                .iter()
                .map(|b| {
                    let lift = if labels[b] { *s } else { 0.0 };
                    BreastScore {
                        exam_id: b.exam_id.clone(),
                        laterality: b.laterality,
                        model_id: id.clone(),
                        score_malignant: (rng.random::<f64>() + lift) / 1.5,
                        score_benign: 0.0,
                    }
                })
                .collect();
            candidates.push((ModelId::new(id, modality), scores));
        }
    }

    let sel = greedy_select(&candidates, &labels, 9, Some(DEFAULT_ALTERNATION))?;
    for (step, (pick, auc)) in sel.picks.iter().zip(&sel.trajectory).enumerate() {
        println!("step {:>2}: {pick:<8} ensemble AUROC {auc:.4}", step + 1);
    }
    println!("multiplicities: {:?}", sel.selection.counts);
    Ok(())
}
