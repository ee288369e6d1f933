//! Resampling tests, confidence intervals and closed-form statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::{aufroc1, auprc, auroc, FrocData, FrocLevel, FrocUnit, ScoredCase};
use crate::rng::substream;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;
pub const DEFAULT_PERMUTATION_ITERS: usize = 10_000;
/// Slack on the "as large or larger" comparison for floating-point deltas.
pub const PERMUTATION_EPS: f64 = 1e-12;

/// Redraw limit for a single bootstrap iteration.
const MAX_DRAWS_PER_RESAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub effect: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples discarded because the metric was undefined on them.
    pub redrawn: usize,
}

/// Linear-interpolated quantile of sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval (2.5th, 97.5th) over unit-level resamples.
///
/// Iteration `i` draws from substream `i` of `seed`, so the interval does
/// not depend on thread scheduling.
pub fn bootstrap_ci<F>(cases: &[ScoredCase], metric: F, n_resamples: usize, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[ScoredCase]) -> Result<f64> + Sync,
{
    if cases.is_empty() || n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs cases and at least one resample"));
    }
    let n = cases.len();
    let draws: Vec<(Option<f64>, usize)> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let mut failed = 0;
            let mut sample = Vec::with_capacity(n);
            while failed < MAX_DRAWS_PER_RESAMPLE {
                sample.clear();
                sample.extend((0..n).map(|_| cases[rng.random_range(0..n)].clone()));
                match metric(&sample) {
                    Ok(v) => return (Some(v), failed),
                    Err(_) => failed += 1,
                }
            }
            (None, failed)
        })
        .collect();
    let redrawn: usize = draws.iter().map(|d| d.1).sum();
    let attempts = redrawn + draws.iter().filter(|d| d.0.is_some()).count();
    if draws.iter().any(|d| d.0.is_none()) || 2 * redrawn > attempts {
        return Err(Error::Undefined(format!(
            "metric undefined on {redrawn} of {attempts} bootstrap resamples"
        )));
    }
    let mut values: Vec<f64> = draws.into_iter().filter_map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: quantile_sorted(&values, 0.025),
        hi: quantile_sorted(&values, 0.975),
        redrawn,
    })
}

/// Within-vector percentile ranks in (0, 1]; ties share their mean rank.
pub fn percentile_ranks(scores: &[f64]) -> Vec<f64> {
    let reference = sorted_copy(scores);
    scores.iter().map(|&s| rank_in(&reference, s)).collect()
}

fn sorted_copy(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean rank of `s` within `sorted`, scaled by its length. Values absent
/// from the reference land halfway between their neighbours' ranks.
fn rank_in(sorted: &[f64], s: f64) -> f64 {
    let less = sorted.partition_point(|&x| x < s);
    let upto = sorted.partition_point(|&x| x <= s);
    let eq = upto - less;
    (less as f64 + (eq as f64 + 1.0) / 2.0) / sorted.len() as f64
}

/// Scores of two models on the same units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPredictions {
    pub unit_ids: Vec<String>,
    pub model_a_scores: Vec<f64>,
    pub model_b_scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl PairedPredictions {
    /// Pair two case lists by unit id, in the order of `a`.
    pub fn align(a: &[ScoredCase], b: &[ScoredCase]) -> Result<PairedPredictions> {
        let index = |cases: &[ScoredCase], name: &str| -> Result<BTreeMap<String, usize>> {
            let mut m = BTreeMap::new();
            for (i, c) in cases.iter().enumerate() {
                if m.insert(c.unit_id.clone(), i).is_some() {
                    return Err(Error::invalid(format!(
                        "unit {} appears twice in model {name}",
                        c.unit_id
                    )));
                }
            }
            Ok(m)
        };
        let ia = index(a, "A")?;
        let ib = index(b, "B")?;
        let ka: BTreeSet<&String> = ia.keys().collect();
        let kb: BTreeSet<&String> = ib.keys().collect();
        if ka != kb {
            return Err(Error::UnitMismatch {
                only_a: ka.difference(&kb).map(|s| s.to_string()).collect(),
                only_b: kb.difference(&ka).map(|s| s.to_string()).collect(),
            });
        }
        let mut out = PairedPredictions {
            unit_ids: Vec::with_capacity(a.len()),
            model_a_scores: Vec::with_capacity(a.len()),
            model_b_scores: Vec::with_capacity(a.len()),
            labels: Vec::with_capacity(a.len()),
        };
        for ca in a {
            let cb = &b[ib[&ca.unit_id]];
            if ca.label != cb.label {
                return Err(Error::invalid(format!("unit {} has conflicting labels", ca.unit_id)));
            }
            out.unit_ids.push(ca.unit_id.clone());
            out.model_a_scores.push(ca.score);
            out.model_b_scores.push(cb.score);
            out.labels.push(ca.label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.unit_ids.len();
        if self.model_a_scores.len() != n || self.model_b_scores.len() != n || self.labels.len() != n {
            return Err(Error::shape("paired predictions have unequal lengths"));
        }
        let unique: BTreeSet<&String> = self.unit_ids.iter().collect();
        if unique.len() != n {
            return Err(Error::invalid("paired predictions repeat a unit id"));
        }
        Ok(())
    }

    fn cases(&self, scores: &[f64]) -> Vec<ScoredCase> {
        self.unit_ids
            .iter()
            .zip(scores)
            .zip(&self.labels)
            .map(|((u, &s), &l)| ScoredCase::new(u.clone(), s, l))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassMetric {
    Auroc,
    Auprc,
}

impl ClassMetric {
    pub fn eval(self, cases: &[ScoredCase]) -> Result<f64> {
        match self {
            ClassMetric::Auroc => auroc(cases),
            ClassMetric::Auprc => auprc(cases),
        }
    }
}

fn one_sided_p(observed: f64, null: &[f64]) -> f64 {
    let hits = null.iter().filter(|&&d| d >= observed - PERMUTATION_EPS).count();
    hits as f64 / null.len() as f64
}

/// Paired permutation test of `metric(B) - metric(A)` on percentile ranks.
pub fn permutation_test(data: &PairedPredictions, metric: ClassMetric, n_iter: usize, seed: u64) -> Result<TestResult> {
    data.validate()?;
    if n_iter == 0 {
        return Err(Error::invalid("permutation test needs at least one iteration"));
    }
    let ra = percentile_ranks(&data.model_a_scores);
    let rb = percentile_ranks(&data.model_b_scores);
    let observed = metric.eval(&data.cases(&rb))? - metric.eval(&data.cases(&ra))?;
    let null: Result<Vec<f64>> = (0..n_iter)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let (mut sa, mut sb) = (ra.clone(), rb.clone());
            for u in 0..sa.len() {
                if rng.random_bool(0.5) {
                    std::mem::swap(&mut sa[u], &mut sb[u]);
                }
            }
            Ok(metric.eval(&data.cases(&sb))? - metric.eval(&data.cases(&sa))?)
        })
        .collect();
    let null = null?;
    Ok(TestResult {
        statistic: observed,
        p_value: one_sided_p(observed, &null),
        effect: None,
        ci: None,
    })
}

/// Rescale a model's box scores by percentile rank within its per-unit
/// top-1 scores.
fn rank_rescaled(data: &FrocData, unit: FrocUnit) -> Result<FrocData> {
    let top: Vec<f64> = data.unit_top1(unit).into_iter().flatten().collect();
    if top.is_empty() {
        return Ok(data.clone());
    }
    let reference = sorted_copy(&top);
    Ok(data.rescored(|s| rank_in(&reference, s)))
}

/// Paired permutation test of AUFROC_1, swapping whole units' box sets
/// (images for lesion level, breasts for breast level).
pub fn permutation_test_froc(
    a: &FrocData,
    b: &FrocData,
    level: FrocLevel,
    n_iter: usize,
    seed: u64,
) -> Result<TestResult> {
    a.check_compatible(b)?;
    if n_iter == 0 {
        return Err(Error::invalid("permutation test needs at least one iteration"));
    }
    let unit = FrocUnit::from(level);
    let ra = rank_rescaled(a, unit)?;
    let rb = rank_rescaled(b, unit)?;
    let observed = aufroc1(&rb.curve(level)?) - aufroc1(&ra.curve(level)?);
    let n_units = a.n_units(unit);
    let null: Result<Vec<f64>> = (0..n_iter)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let swap: Vec<bool> = (0..n_units).map(|_| rng.random_bool(0.5)).collect();
            let keep: Vec<bool> = swap.iter().map(|s| !s).collect();
            let pa = ra.mixed(&rb, unit, &swap)?;
            let pb = ra.mixed(&rb, unit, &keep)?;
            Ok(aufroc1(&pb.curve(level)?) - aufroc1(&pa.curve(level)?))
        })
        .collect();
    let null = null?;
    Ok(TestResult {
        statistic: observed,
        p_value: one_sided_p(observed, &null),
        effect: None,
        ci: None,
    })
}

/// Proportional shrinkage of `1 - AUC` from baseline to improved model.
pub fn reduction_of_error(auc_baseline: f64, auc_improved: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&auc_baseline) || !(0.0..=1.0).contains(&auc_improved) {
        return Err(Error::invalid(format!(
            "need baseline in [0, 1) and improved in [0, 1], got {auc_baseline} and {auc_improved}"
        )));
    }
    Ok(1.0 - (1.0 - auc_improved) / (1.0 - auc_baseline))
}

pub fn cohens_h(p1: f64, p2: f64) -> Result<f64> {
    for p in [p1, p2] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("proportion {p} outside [0, 1]")));
        }
    }
    Ok(2.0 * p1.sqrt().asin() - 2.0 * p2.sqrt().asin())
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-tailed pooled two-proportion z-test; `effect` carries Cohen's h.
pub fn two_prop_ztest(r1: u64, n1: u64, r2: u64, n2: u64) -> Result<TestResult> {
    if n1 == 0 || n2 == 0 || r1 > n1 || r2 > n2 {
        return Err(Error::invalid(format!("invalid counts {r1}/{n1} and {r2}/{n2}")));
    }
    let (p1, p2) = (r1 as f64 / n1 as f64, r2 as f64 / n2 as f64);
    let pooled = (r1 + r2) as f64 / (n1 + n2) as f64;
    if pooled == 0.0 || pooled == 1.0 {
        return Err(Error::Undefined("pooled proportion has zero variance".into()));
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let z = (p1 - p2) / se;
    Ok(TestResult {
        statistic: z,
        p_value: (2.0 * std_normal().sf(z.abs())).min(1.0),
        effect: Some(cohens_h(p1, p2)?),
        ci: None,
    })
}

/// Per-group sample size for comparing two proportions, rounded up.
pub fn sample_size(p1: f64, p2: f64, alpha: f64, power: f64) -> Result<u64> {
    for p in [p1, p2] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("proportion {p} outside (0, 1)")));
        }
    }
    if p1 == p2 {
        return Err(Error::Undefined("sample size undefined for equal proportions".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0 && power > 0.0 && power < 1.0) {
        return Err(Error::invalid(format!(
            "alpha {alpha} and power {power} must lie in (0, 1)"
        )));
    }
    let n = std_normal();
    let z = n.inverse_cdf(1.0 - alpha / 2.0) + n.inverse_cdf(power);
    let var = p1 * (1.0 - p1) + p2 * (1.0 - p2);
    Ok((z * z * var / ((p1 - p2) * (p1 - p2))).ceil() as u64)
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_uniform_statistic(samples: &[f64]) -> f64 {
    let v = sorted_copy(samples);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Large-sample KS critical value for `n` samples at level `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}
