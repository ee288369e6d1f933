//! Set the triage threshold from a calibration set, sort exams into green,
//! mixed and gray, and sweep the recall-savings curve.

use rand::Rng;

use mammoscreen::ensemble::{
    max_safe_rejection, operating_point, recall_savings_curve, triage, triage_counts, ExamOutcome,
};
use mammoscreen::rng::seeded;

fn exams(seed: u64, n: usize) -> Vec<ExamOutcome> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let cancer = rng.random_bool(0.02);
            let base = |rng: &mut rand_chacha::ChaCha8Rng| rng.random::<f64>().powi(3);
            let (mut left, right) = (base(&mut rng), base(&mut rng));
            if cancer {
                left = 0.3 + 0.7 * rng.random::<f64>();
            }
            ExamOutcome {
                exam_id: format!("ex{i:05}"),
                left,
                right,
                cancer,
                recalled: cancer || rng.random_bool(0.08),
            }
        })
        .collect()
}

fn main() -> mammoscreen::Result<()> {
    let calibration = exams(1, 5000);
    let breast_scores: Vec<f64> = calibration.iter().flat_map(|e| [e.left, e.right]).collect();
    let breast_labels: Vec<bool> = calibration.iter().flat_map(|e| [e.cancer, false]).collect();
    let op = operating_point(&breast_scores, &breast_labels, 1.0)?;
    println!(
        "lowest positive {:.4} at percentile {:.2}; with a 1-point margin the threshold is {:.4}",
        op.base_threshold, op.base_percentile, op.threshold
    );

    let test = exams(2, 5000);
    let results: Vec<_> = test
        .iter()
        .map(|e| triage(&e.exam_id, e.left, e.right, op.threshold))
        .collect();
    for (category, count) in triage_counts(&results) {
        println!("{category:?}: {count}");
    }

    let safe = max_safe_rejection(&test)?;
    println!(
        "all cancers kept while rejecting the bottom {:.1}% ({:.1}% of recalls avoided)",
        100.0 * safe.fraction_workload_saved,
        100.0 * safe.fraction_recalls_saved.unwrap_or(0.0)
    );
    for row in recall_savings_curve(&test, &[10.0, 25.0, 50.0, 75.0]) {
        println!(
            "reject {:>4.0}%: sensitivity {:.3} specificity {:.3}",
            row.percentile,
            row.sensitivity.unwrap_or(f64::NAN),
            row.specificity.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
