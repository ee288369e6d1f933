//! Closed-form study-design statistics: sample size, Cohen's h, the
//! two-proportion z-test and reduction of error.

use mammoscreen::stats::{cohens_h, reduction_of_error, sample_size, two_prop_ztest};

fn main() -> mammoscreen::Result<()> {
    for (p1, p2) in [(0.143, 0.175), (0.130, 0.146), (0.076, 0.053), (0.116, 0.125)] {
        println!("n per group for {p1} vs {p2}: {}", sample_size(p1, p2, 0.05, 0.8)?);
    }
    println!("Cohen's h(0.116, 0.126) = {:.4}", cohens_h(0.116, 0.126)?);

    let z = two_prop_ztest(1160, 10000, 1260, 10000)?;
    println!("z = {:.3}, two-sided p = {:.4}", z.statistic, z.p_value);

    for (base, improved) in [(0.832, 0.929), (0.891, 0.892), (0.827, 0.791)] {
        println!(
            "AUC {base} -> {improved}: {:+.2}% reduction of error",
            100.0 * reduction_of_error(base, improved)?
        );
    }
    Ok(())
}
