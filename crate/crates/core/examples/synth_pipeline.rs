//! Generate a synthetic dataset, write it to disk, read it back and
//! evaluate every model at the breast level.

use std::collections::{BTreeMap, BTreeSet};

use mammoscreen::cli::commands::breast_scores;
use mammoscreen::cli::io::{read_labels, read_predictions};
use mammoscreen::cli::synth::{synth_generate, SynthConfig, LABELS_FILE, PREDICTIONS_FILE};
use mammoscreen::metrics::{auprc, auroc, ScoredCase};

fn main() -> mammoscreen::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = SynthConfig {
        n_exams: 40,
        seed: 11,
        ..SynthConfig::default()
    };
    synth_generate(&cfg)?.write_to(dir.path())?;
    println!("wrote synthetic data to {}", dir.path().display());

    let records = read_predictions(&dir.path().join(PREDICTIONS_FILE))?;
    let labels: BTreeMap<_, _> = read_labels(&dir.path().join(LABELS_FILE))?
        .iter()
        .map(|l| (l.breast(), l.malignant == 1))
        .collect();
    let scores = breast_scores(&records)?;
    let models: BTreeSet<&str> = scores.iter().map(|s| s.model_id.as_str()).collect();
    for model in models {
        let cases: Vec<ScoredCase> = scores
            .iter()
            .filter(|s| s.model_id == model)
            .filter_map(|s| {
                labels
                    .get(&s.breast())
                    .map(|&l| ScoredCase::new(s.breast().to_string(), s.score_malignant, l))
            })
            .collect();
        println!(
            "{model:<10} breasts {:>3}  AUROC {:.3}  AUPRC {:.3}",
            cases.len(),
            auroc(&cases)?,
            auprc(&cases)?
        );
    }
    Ok(())
}
