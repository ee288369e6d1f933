//! Acceptance criteria, one test per criterion. Each test prints a single
//! `[PASS]` / `[FAIL]` line straight to stdout so the verdicts show up in a
//! plain `cargo test` log.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use mammoscreen::cohort::{
    filter_test_set, filter_test_set_with, ExamKind, ExamRecord, PathologyRecord, Rule, Timeline,
};
use mammoscreen::detect::{
    match_triplets, mss, GridCandidate, ImageGeom, ScoreGrid, SliceStack, TripletCandidate, HOLOGIC_RESIZE_PAIRS,
    TRIPLET_EXCLUDE_ROWS, TRIPLET_IOU_THRESHOLD,
};
use mammoscreen::ensemble::{
    flag, greedy_select, max_safe_rejection, operating_point, triage, triage_counts, BreastFlag, BreastScore,
    ExamOutcome, ModelId, TriageCategory,
};
use mammoscreen::geometry::BreastKey;
use mammoscreen::head::{compose_loss, detection_loss_applies, gated_attention, AttentionParams, ImagePrediction};
use mammoscreen::metrics::{
    aufroc1, auroc, froc, match_tp, EvalImage, FrocCurve, FrocLevel, FrocPoint, GroundTruthBox, ScoredCase,
};
use mammoscreen::rng::substream;
use mammoscreen::stats::{cohens_h, permutation_test, reduction_of_error, sample_size, ClassMetric, PairedPredictions};
use mammoscreen::{BBox2D, DetBox, ImageKey, Laterality, Mask, Modality, Target, View};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn criterion(id: u8, desc: &str, limit: Duration, body: impl FnOnce() -> Check) {
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let elapsed = start.elapsed();
    let outcome = outcome.and_then(|()| {
        if elapsed <= limit {
            Ok(())
        } else {
            Err(format!("runtime {elapsed:?} exceeds {limit:?}"))
        }
    });
    let ms = elapsed.as_millis();
    let line = match &outcome {
        Ok(()) => format!("[PASS] C{id} {desc} ({ms} ms)\n"),
        Err(e) => format!("[FAIL] C{id} {desc} ({ms} ms): {e}\n"),
    };
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    if let Err(e) = outcome {
        panic!("C{id} failed: {e}");
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn key(exam: &str, lat: Laterality, view: View, modality: Modality, image_id: &str) -> ImageKey {
    ImageKey {
        patient_id: format!("p-{exam}"),
        exam_id: exam.into(),
        laterality: lat,
        view,
        modality,
        image_id: image_id.into(),
    }
}

#[test]
fn c01_sample_size() {
    criterion(
        1,
        "sample size reproduces the four study designs within +-2",
        secs(1),
        || {
            for (p1, p2, want) in [
                (0.143, 0.175, 2046u64),
                (0.130, 0.146, 7291),
                (0.076, 0.053, 1787),
                (0.116, 0.125, 20535),
            ] {
                let n = sample_size(p1, p2, 0.05, 0.8).map_err(|e| e.to_string())?;
                ensure!(n.abs_diff(want) <= 2, "({p1}, {p2}) gave {n}, want {want} +- 2");
            }
            Ok(())
        },
    );
}

#[test]
fn c02_cohens_h() {
    criterion(
        2,
        "Cohen's h(0.116, 0.126) magnitude is 0.030 +- 0.0005",
        secs(1),
        || {
            let h = cohens_h(0.116, 0.126).map_err(|e| e.to_string())?.abs();
            ensure!((h - 0.030).abs() <= 0.0005, "|h| = {h:.6}, outside 0.030 +- 0.0005");
            Ok(())
        },
    );
}

#[test]
fn c03_reduction_of_error() {
    // (label, baseline, improved, reported percent)
    const PAIRS: [(&str, f64, f64, f64); 28] = [
        ("CMMD ROC v1", 0.831, 0.891, 35.31),
        ("CMMD PR v1", 0.859, 0.908, 34.88),
        ("OPTIMAM ROC v1", 0.832, 0.929, 57.48),
        ("OPTIMAM PR v1", 0.633, 0.799, 45.20),
        ("CSAW-CC ROC v1", 0.943, 0.982, 69.14),
        ("CSAW-CC PR v1", 0.495, 0.763, 53.11),
        ("EMBED ROC v1", 0.782, 0.890, 49.39),
        ("EMBED PR v1", 0.064, 0.213, 15.89),
        ("InBreast ROC v1", 0.980, 0.996, 81.82),
        ("InBreast PR v1", 0.957, 0.991, 79.19),
        ("CBIS-DDSM ROC v1", 0.610, 0.827, 55.56),
        ("CBIS-DDSM PR v1", 0.569, 0.842, 62.93),
        ("BCS-DBT ROC v1", 0.857, 0.944, 60.74),
        ("BCS-DBT PR v1", 0.165, 0.405, 28.73),
        ("CMMD ROC v2", 0.891, 0.892, 1.50),
        ("CMMD PR v2", 0.908, 0.909, 1.04),
        ("OPTIMAM ROC v2", 0.929, 0.942, 18.86),
        ("OPTIMAM PR v2", 0.799, 0.828, 14.44),
        ("CSAW-CC ROC v2", 0.982, 0.988, 33.97),
        ("CSAW-CC PR v2", 0.763, 0.797, 14.22),
        ("EMBED ROC v2", 0.890, 0.922, 29.15),
        ("EMBED PR v2", 0.213, 0.289, 9.61),
        ("InBreast ROC v2", 0.996, 1.000, 100.0),
        ("InBreast PR v2", 0.991, 1.000, 100.0),
        ("CBIS-DDSM ROC v2", 0.827, 0.791, -20.92),
        ("CBIS-DDSM PR v2", 0.842, 0.813, -17.83),
        ("BCS-DBT ROC v2", 0.944, 0.976, 56.62),
        ("BCS-DBT PR v2", 0.405, 0.490, 14.30),
    ];
    criterion(
        3,
        "reduction of error matches the reported external pairs within 1.5 pp",
        secs(1),
        || {
            let mut misses = Vec::new();
            for (label, base, imp, reported) in PAIRS {
                let pct = 100.0 * reduction_of_error(base, imp).map_err(|e| e.to_string())?;
                if (pct - reported).abs() > 1.5 {
                    misses.push(format!(
                        "{label}: {base:.3}->{imp:.3} gives {pct:.2}, reported {reported:.2}"
                    ));
                }
            }
            ensure!(misses.is_empty(), "{}", misses.join("; "));
            Ok(())
        },
    );
}

fn box_iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Greedy NMS by repeated maximum extraction.
fn brute_nms(mut pool: Vec<DetBox>, thr: f64) -> Vec<DetBox> {
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let best = (0..pool.len())
            .max_by(|&i, &j| pool[i].score_malignant.total_cmp(&pool[j].score_malignant))
            .unwrap();
        let b = pool.swap_remove(best);
        pool.retain(|o| box_iou(&o.geom, &b.geom) <= thr);
        kept.push(b);
    }
    kept
}

fn box_signature(b: &DetBox) -> (Option<u32>, [u64; 4], u64) {
    (
        b.slice,
        [b.geom.x0(), b.geom.y0(), b.geom.x1(), b.geom.y1()].map(f64::to_bits),
        b.score_malignant.to_bits(),
    )
}

#[test]
fn c04_mss_equals_brute_force_nms() {
    criterion(
        4,
        "MSS equals brute-force NMS over concatenated slices on 250 stacks",
        secs(10),
        || {
            for trial in 0..250u64 {
                let mut rng = substream(4, trial);
                let (h, w) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
                let n_slices = rng.random_range(1..=8usize);
                let thr = [0.1, 0.3, 0.5, 0.7, 0.9][rng.random_range(0..5)];
                let geoms: Vec<BBox2D> = (0..h * w)
                    .map(|i| {
                        let (r, c) = ((i / w) as f64, (i % w) as f64);
                        let bw = rng.random_range(3..=10) as f64;
                        let bh = rng.random_range(3..=10) as f64;
                        BBox2D::from_corners(10.0 * c, 10.0 * r, 10.0 * c + bw, 10.0 * r + bh)
                    })
                    .collect();
                let total = h * w * n_slices;
                let mut ranks: Vec<usize> = (1..=total).collect();
                ranks.shuffle(&mut rng);
                let mut grids = Vec::new();
                let mut concatenated = Vec::new();
                for s in 0..n_slices {
                    let cells: Vec<GridCandidate> = (0..h * w)
                        .map(|i| GridCandidate {
                            geom: geoms[i],
                            score_malignant: ranks[s * h * w + i] as f64 / (total + 1) as f64,
                            score_benign: rng.random(),
                        })
                        .collect();
                    for (i, c) in cells.iter().enumerate() {
                        concatenated.push(
                            DetBox::new(c.geom, c.score_malignant, c.score_benign, Modality::Dbt)
                                .with_slice(s as u32)
                                .with_anchor(i / w, i % w),
                        );
                    }
                    grids.push(ScoreGrid::new(h, w, cells).map_err(|e| e.to_string())?);
                }
                let stack = SliceStack::new(grids).map_err(|e| e.to_string())?;
                let mut got: Vec<_> = mss(&stack, Target::Malignant, thr).iter().map(box_signature).collect();
                let mut want: Vec<_> = brute_nms(concatenated, thr).iter().map(box_signature).collect();
                got.sort();
                want.sort();
                ensure!(
                    got == want,
                    "stack {trial} ({h}x{w}x{n_slices}, iou {thr}): box sets differ"
                );
            }
            Ok(())
        },
    );
}

fn concordance(cases: &[ScoredCase]) -> f64 {
    let (mut greater, mut equal) = (0u64, 0u64);
    let p = cases.iter().filter(|c| c.label).count();
    let n = cases.len() - p;
    for a in cases.iter().filter(|c| c.label) {
        for b in cases.iter().filter(|c| !c.label) {
            if a.score > b.score {
                greater += 1;
            } else if a.score == b.score {
                equal += 1;
            }
        }
    }
    (2 * greater + equal) as f64 / (2.0 * p as f64 * n as f64)
}

#[test]
fn c05_auroc_equals_concordance() {
    criterion(
        5,
        "AUROC equals the tie-adjusted concordance oracle on 100 datasets",
        secs(10),
        || {
            for trial in 0..100u64 {
                let mut rng = substream(5, trial);
                let n = rng.random_range(2..=200usize);
                let levels = rng.random_range(2..=20u32);
                let mut cases: Vec<ScoredCase> = (0..n)
                    .map(|i| {
                        let s = rng.random_range(0..=levels) as f64 / levels as f64;
                        ScoredCase::new(format!("u{i}"), s, rng.random_bool(0.4))
                    })
                    .collect();
                cases[0].label = true;
                cases[1].label = false;
                let got = auroc(&cases).map_err(|e| e.to_string())?;
                let want = concordance(&cases);
                ensure!(got == want, "dataset {trial}: auroc {got} vs concordance {want}");
            }
            Ok(())
        },
    );
}

fn ks_statistic(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        d = d.max((i + 1) as f64 / n - x).max(x - i as f64 / n);
    }
    d
}

fn paired_null_data(rep: u64, n: usize) -> PairedPredictions {
    let mut rng = substream(6, rep);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let latent: Vec<f64> = labels
        .iter()
        .map(|&l| rng.random::<f64>() + if l { 0.5 } else { 0.0 })
        .collect();
    let mut noisy = |x: f64| x + 0.5 * rng.random::<f64>();
    PairedPredictions {
        unit_ids: (0..n).map(|i| format!("u{i}")).collect(),
        model_a_scores: latent.iter().map(|&x| noisy(x)).collect(),
        model_b_scores: latent.iter().map(|&x| noisy(x)).collect(),
        labels,
    }
}

#[test]
fn c06_permutation_test() {
    criterion(
        6,
        "permutation test: identical models give p = 1, null p-values are uniform",
        secs(120),
        || {
            for metric in [ClassMetric::Auroc, ClassMetric::Auprc] {
                let mut d = paired_null_data(u64::MAX, 200);
                d.model_b_scores = d.model_a_scores.clone();
                let r = permutation_test(&d, metric, 2000, 1).map_err(|e| e.to_string())?;
                ensure!(r.p_value == 1.0, "{metric:?}: identical models gave p = {}", r.p_value);
            }
            let (reps, units) = (200u64, 200usize);
            let mut pvals = Vec::with_capacity(reps as usize);
            for rep in 0..reps {
                let d = paired_null_data(rep, units);
                pvals.push(
                    permutation_test(&d, ClassMetric::Auroc, 1000, rep)
                        .map_err(|e| e.to_string())?
                        .p_value,
                );
            }
            let d = ks_statistic(&pvals);
            let critical = (-(0.01f64 / 2.0).ln() / 2.0).sqrt() / (reps as f64).sqrt();
            ensure!(
                d <= critical,
                "KS statistic {d:.4} exceeds critical value {critical:.4}"
            );
            Ok(())
        },
    );
}

fn gt_box(image: &ImageKey, geom: BBox2D, slice: Option<u32>, lesion: &str) -> GroundTruthBox {
    GroundTruthBox {
        geom,
        slice,
        lesion_id: lesion.into(),
        image: image.clone(),
    }
}

#[test]
fn c07_froc() {
    criterion(
        7,
        "FROC: perfect detector, hand-built curve and match_tp truth table",
        secs(5),
        || {
            // A perfect detector: every lesion hit at score 1, decoys far away at 0.1.
            let mut images = Vec::new();
            let mut gts = Vec::new();
            for i in 0..12 {
                let lat = if i % 2 == 0 {
                    Laterality::Left
                } else {
                    Laterality::Right
                };
                let dbt = i % 3 == 0;
                let modality = if dbt { Modality::Dbt } else { Modality::Ffdm };
                let k = key(&format!("ex{}", i / 2), lat, View::CC, modality, &format!("im{i}"));
                let n_slices = dbt.then_some(20);
                let mut preds = vec![DetBox::new(
                    BBox2D::from_corners(1500.0, 1500.0, 1540.0, 1540.0),
                    0.1,
                    0.0,
                    modality,
                )];
                if i % 4 != 3 {
                    for l in 0..(1 + i % 2) {
                        let g = BBox2D::from_corners(100.0 + 300.0 * l as f64, 200.0, 160.0 + 300.0 * l as f64, 280.0);
                        let slice = dbt.then_some(5 + l as u32);
                        gts.push(gt_box(&k, g, slice, &format!("les{l}")));
                        let mut p = DetBox::new(g, 1.0, 0.0, modality);
                        p.slice = slice;
                        preds.push(p);
                    }
                }
                if dbt {
                    for p in &mut preds {
                        p.slice.get_or_insert(0);
                    }
                }
                images.push(EvalImage {
                    key: k,
                    n_slices,
                    predictions: preds,
                });
            }
            for level in [FrocLevel::Lesion, FrocLevel::Breast] {
                let curve = froc(&images, &gts, level).map_err(|e| e.to_string())?;
                let a = aufroc1(&curve);
                ensure!(a == 1.0, "perfect detector at {level:?} level scored {a}");
            }

            let hand = FrocCurve {
                points: vec![
                    FrocPoint {
                        threshold: Some(0.9),
                        fp_per_image: 0.0,
                        sensitivity: 0.5,
                    },
                    FrocPoint {
                        threshold: Some(0.4),
                        fp_per_image: 0.5,
                        sensitivity: 1.0,
                    },
                ],
                n_images: 2,
                level: FrocLevel::Lesion,
            };
            let a = aufroc1(&hand);
            ensure!((a - 0.75).abs() < 1e-15, "hand-built curve integrates to {a}");

            // (gt width, gt height): a large lesion whose half-diagonal is 250 px
            // and a small one that falls back to 100 px.
            let shapes = [(300.0, 400.0), (20.0, 20.0)];
            let offsets = [0.0, 60.0, 99.5, 100.0, 100.5, 180.0, 249.5, 250.0, 250.5, 400.0];
            let mut checked = 0;
            for (gw, gh) in shapes {
                let g = BBox2D::new(1000.0, 1000.0, gw, gh).unwrap();
                let radius = f64::max((gw * gw + gh * gh).sqrt() / 2.0, 100.0);
                for &dx in &offsets {
                    let pg = BBox2D::new(1000.0 + dx, 1000.0, 30.0, 30.0).unwrap();
                    let close = dx < radius;
                    for modality in [Modality::Ffdm, Modality::Cview] {
                        let k = key("ex", Laterality::Left, View::MLO, modality, "planar");
                        let got = match_tp(&DetBox::new(pg, 0.5, 0.0, modality), &gt_box(&k, g, None, "l"), None)
                            .map_err(|e| e.to_string())?;
                        ensure!(got == close, "{modality} gt {gw}x{gh} offset {dx}: got {got}");
                        checked += 1;
                    }
                    let k = key("ex", Laterality::Left, View::MLO, Modality::Dbt, "volume");
                    for n in [4u32, 8, 10, 12, 30] {
                        for gs in [0u32, 3, 7] {
                            for ps in 0..n {
                                let pred = DetBox::new(pg, 0.5, 0.0, Modality::Dbt).with_slice(ps);
                                let got = match_tp(&pred, &gt_box(&k, g, Some(gs), "l"), Some(n))
                                    .map_err(|e| e.to_string())?;
                                let want = close && 4 * ps.abs_diff(gs) <= n;
                                ensure!(
                                    got == want,
                                    "DBT n={n} gt slice {gs} pred slice {ps} offset {dx}: got {got}"
                                );
                                checked += 1;
                            }
                        }
                    }
                    let k = key("ex", Laterality::Left, View::MLO, Modality::Dbt, "volume");
                    let missing = match_tp(
                        &DetBox::new(pg, 0.5, 0.0, Modality::Dbt),
                        &gt_box(&k, g, Some(1), "l"),
                        Some(8),
                    );
                    ensure!(missing.is_err(), "DBT prediction without a slice was accepted");
                }
            }
            ensure!(checked > 1000, "truth table only covered {checked} cases");
            Ok(())
        },
    );
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn exam(id: &str, patient: &str, date: NaiveDate, kind: ExamKind, birads: Option<u8>) -> ExamRecord {
    ExamRecord {
        exam_id: id.into(),
        patient_id: patient.into(),
        date,
        kind,
        birads,
        occult_left: false,
        occult_right: false,
    }
}

fn path(patient: &str, date: NaiveDate, lat: Laterality, malignant: bool) -> PathologyRecord {
    PathologyRecord {
        patient_id: patient.into(),
        date,
        laterality: lat,
        malignant,
        benign: !malignant,
    }
}

/// Timelines paired with the rule each screening exam should receive.
fn golden_timeline() -> (Timeline, Vec<(&'static str, Rule)>) {
    use ExamKind::*;
    let d = day(2021, 3, 15);
    let plus = |n: u64| d.checked_add_days(chrono::Days::new(n)).unwrap();
    let mut t = Timeline::default();
    let mut push = |e: ExamRecord| t.exams.push(e);

    push(exam("e1-birads3", "p1", d, ScreeningMammo, Some(3)));
    push(exam("e1-birads4", "p1b", d, ScreeningMammo, Some(4)));
    push(exam("e1-missing", "p1c", d, ScreeningMammo, None));
    push(exam("e2", "p2", d, ScreeningMammo, Some(1)));
    push(exam("e2-day120", "p2b", d, ScreeningMammo, Some(2)));
    push(exam("pass-day121", "p2c", d, ScreeningMammo, Some(1)));
    push(exam("e3", "p3", d, ScreeningMammo, Some(2)));
    push(exam("e4-no-follow-up", "p4", d, ScreeningMammo, Some(0)));
    push(exam("e4-ok", "p4b", d, ScreeningMammo, Some(0)));
    push(exam("e4-ok-fu", "p4b", day(2021, 7, 15), DiagnosticMammo, Some(2)));
    push(exam("e4-bad", "p4c", d, ScreeningMammo, Some(0)));
    push(exam("e4-bad-fu1", "p4c", day(2021, 5, 1), OtherBreastImaging, Some(2)));
    push(exam("e4-bad-fu2", "p4c", day(2021, 8, 1), DiagnosticMammo, Some(4)));
    push(exam("e4-edge", "p4d", d, ScreeningMammo, Some(0)));
    push(exam("e4-edge-fu", "p4d", day(2021, 9, 15), OtherBreastImaging, Some(1)));
    push(exam("e4-late", "p4e", d, ScreeningMammo, Some(0)));
    push(exam("e4-late-fu", "p4e", day(2021, 9, 16), DiagnosticMammo, Some(1)));
    push(exam("e4-clamp", "p4f", day(2021, 8, 31), ScreeningMammo, Some(0)));
    push(exam("e4-clamp-fu", "p4f", day(2022, 2, 28), DiagnosticMammo, Some(3)));
    push(exam("e4-clamp-late", "p4g", day(2021, 8, 31), ScreeningMammo, Some(0)));
    push(exam(
        "e4-clamp-late-fu",
        "p4g",
        day(2022, 3, 1),
        DiagnosticMammo,
        Some(3),
    ));
    push(exam("e5", "p5", d, ScreeningMammo, Some(1)));
    push(exam("e5-fu", "p5", day(2022, 2, 15), OtherBreastImaging, None));
    push(exam("e5-ok", "p5b", d, ScreeningMammo, Some(1)));
    push(exam("e5-ok-fu", "p5b", day(2022, 2, 16), ScreeningMammo, Some(1)));
    push(exam("occult", "p6", d, ScreeningMammo, Some(0)));
    push(exam("occult-fu", "p6", day(2021, 4, 1), DiagnosticMammo, Some(2)));
    push(exam("visible", "p6b", d, ScreeningMammo, Some(0)));
    push(exam("visible-fu", "p6b", day(2021, 4, 1), DiagnosticMammo, Some(2)));
    push(exam("occult-e1", "p7", d, ScreeningMammo, Some(5)));
    push(exam("occult-e2", "p7b", d, ScreeningMammo, Some(1)));
    push(exam("malignant-pass", "p8", d, ScreeningMammo, Some(0)));

    for e in &mut t.exams {
        if ["occult", "occult-e1", "occult-e2"].contains(&e.exam_id.as_str()) {
            e.occult_right = true;
        }
        if e.exam_id == "visible" {
            e.occult_left = true;
        }
    }
    t.pathology = vec![
        path("p2", plus(30), Laterality::Left, true),
        path("p2b", plus(120), Laterality::Right, true),
        path("p2c", plus(121), Laterality::Right, true),
        path("p3", plus(10), Laterality::Left, false),
        path("p6", plus(20), Laterality::Right, true),
        path("p6b", plus(20), Laterality::Right, true),
        path("p6b", plus(20), Laterality::Left, true),
        path("p7", plus(5), Laterality::Right, true),
        path("p7b", plus(5), Laterality::Right, true),
        path("p8", d, Laterality::Left, true),
    ];
    let want = vec![
        ("e1-birads3", Rule::E1),
        ("e1-birads4", Rule::E1),
        ("e1-missing", Rule::E1),
        ("e2", Rule::E2),
        ("e2-day120", Rule::E2),
        ("pass-day121", Rule::Pass),
        ("e3", Rule::E3),
        ("e4-no-follow-up", Rule::E4),
        ("e4-ok", Rule::Pass),
        ("e4-bad", Rule::E4),
        ("e4-edge", Rule::Pass),
        ("e4-late", Rule::E4),
        ("e4-clamp", Rule::Pass),
        ("e4-clamp-late", Rule::E4),
        ("e5", Rule::E5),
        ("e5-ok", Rule::Pass),
        ("e5-ok-fu", Rule::Pass),
        ("occult", Rule::OccultOnly),
        ("visible", Rule::Pass),
        ("occult-e1", Rule::E1),
        ("occult-e2", Rule::E2),
        ("malignant-pass", Rule::Pass),
    ];
    (t, want)
}

#[test]
fn c08_cohort_filter() {
    criterion(
        8,
        "cohort filter matches the golden timelines and rule order matters",
        secs(5),
        || {
            let (timeline, want) = golden_timeline();
            let got = filter_test_set(&timeline).map_err(|e| e.to_string())?;
            let tags: BTreeMap<&str, Rule> = got.iter().map(|o| (o.exam_id.as_str(), o.rule)).collect();
            ensure!(
                tags.len() == want.len(),
                "{} screening exams tagged, expected {}",
                tags.len(),
                want.len()
            );
            for (id, rule) in &want {
                ensure!(
                    tags.get(id) == Some(rule),
                    "exam {id}: got {:?}, want {rule:?}",
                    tags.get(id)
                );
            }
            for o in &got {
                ensure!(
                    o.included == (o.rule == Rule::Pass),
                    "exam {}: included flag disagrees with tag",
                    o.exam_id
                );
            }
            ensure!(
                got.iter().map(|o| o.rule).collect::<Vec<_>>()
                    == filter_test_set(&timeline)
                        .unwrap()
                        .iter()
                        .map(|o| o.rule)
                        .collect::<Vec<_>>(),
                "filter is not deterministic"
            );

            let occult_first = [Rule::OccultOnly, Rule::E1, Rule::E2, Rule::E3, Rule::E4, Rule::E5];
            let mutated = filter_test_set_with(&timeline, &occult_first).map_err(|e| e.to_string())?;
            let mtags: BTreeMap<&str, Rule> = mutated.iter().map(|o| (o.exam_id.as_str(), o.rule)).collect();
            for id in ["occult-e1", "occult-e2"] {
                ensure!(
                    mtags[id] == Rule::OccultOnly,
                    "exam {id} under occult-first order: {:?}",
                    mtags[id]
                );
            }
            let changed: Vec<&str> = want
                .iter()
                .filter(|(id, r)| mtags[id] != *r)
                .map(|(id, _)| *id)
                .collect();
            ensure!(
                changed == ["occult-e1", "occult-e2"],
                "occult-first order changed {changed:?}"
            );

            let e5_first = [Rule::E5, Rule::E1, Rule::E2, Rule::E3, Rule::E4, Rule::OccultOnly];
            let e5_tags = filter_test_set_with(&timeline, &e5_first).map_err(|e| e.to_string())?;
            let same = e5_tags.iter().zip(&got).all(|(a, b)| a.rule == b.rule);
            ensure!(
                same,
                "E5 and E1-E4 are mutually exclusive here, so moving E5 first must not change tags"
            );
            Ok(())
        },
    );
}

#[test]
fn c09_operating_point_and_triage() {
    criterion(
        9,
        "operating point rejects the min-positive percentile; triage counts are monotone",
        secs(5),
        || {
            let mut rng = substream(9, 0);
            let n = 1000;
            let below = 438;
            let mut exams = Vec::with_capacity(n);
            for i in 0..n {
                let (cancer, score) = if i < below {
                    (false, 0.01 + 0.4 * i as f64 / below as f64)
                } else if i == below {
                    (true, 0.45)
                } else if i % 10 == 0 {
                    (true, 0.45 + 0.5 * rng.random::<f64>())
                } else {
                    (false, 0.45 + 0.5 * rng.random::<f64>())
                };
                let other = score * rng.random::<f64>();
                let (left, right) = if rng.random_bool(0.5) {
                    (score, other)
                } else {
                    (other, score)
                };
                exams.push(ExamOutcome {
                    exam_id: format!("ex{i:04}"),
                    left,
                    right,
                    cancer,
                    recalled: cancer || rng.random_bool(0.1),
                });
            }
            exams.shuffle(&mut rng);

            let row = max_safe_rejection(&exams).map_err(|e| e.to_string())?;
            ensure!(
                row.sensitivity == Some(1.0),
                "sensitivity at the safe rejection is {:?}",
                row.sensitivity
            );
            ensure!(
                (row.percentile - 43.8).abs() < 1e-9,
                "min positive sits at percentile {}",
                row.percentile
            );
            ensure!(
                (row.fraction_workload_saved - 0.438).abs() < 1e-12,
                "workload saved reads {}",
                row.fraction_workload_saved
            );

            let scores: Vec<f64> = exams.iter().map(ExamOutcome::score).collect();
            let labels: Vec<bool> = exams.iter().map(|e| e.cancer).collect();
            let op = operating_point(&scores, &labels, 0.0).map_err(|e| e.to_string())?;
            let green = scores
                .iter()
                .filter(|&&s| flag(s, op.threshold) == BreastFlag::Green)
                .count();
            let missed = scores
                .iter()
                .zip(&labels)
                .filter(|(&s, &l)| l && s < op.threshold)
                .count();
            ensure!(missed == 0, "{missed} positives fall below the margin-0 threshold");
            ensure!(
                (green as f64 / n as f64 - op.base_percentile / 100.0).abs() < 1e-12,
                "rejected fraction {} vs min-positive percentile {}",
                green as f64 / n as f64,
                op.base_percentile
            );

            let mut prev: Option<BTreeMap<TriageCategory, usize>> = None;
            for step in 0..=200 {
                let t = step as f64 / 200.0;
                let results: Vec<_> = exams.iter().map(|e| triage(&e.exam_id, e.left, e.right, t)).collect();
                let counts = triage_counts(&results);
                ensure!(
                    counts.values().sum::<usize>() == n,
                    "triage counts do not cover every exam"
                );
                if let Some(p) = &prev {
                    ensure!(
                        counts[&TriageCategory::AllGreen] >= p[&TriageCategory::AllGreen],
                        "all-green shrank at {t}"
                    );
                    ensure!(
                        counts[&TriageCategory::AllGray] <= p[&TriageCategory::AllGray],
                        "all-gray grew at {t}"
                    );
                }
                prev = Some(counts);
            }
            Ok(())
        },
    );
}

fn mean_auroc(sum: &[f64], add: &[f64], k: f64, labels: &[bool]) -> f64 {
    let cases: Vec<ScoredCase> = sum
        .iter()
        .zip(add)
        .zip(labels)
        .enumerate()
        .map(|(i, ((s, a), &l))| ScoredCase::new(format!("{i}"), (s + a) / k, l))
        .collect();
    concordance(&cases)
}

#[test]
fn c10_greedy_selection() {
    criterion(
        10,
        "greedy selection picks the dominant model per slot and matches exhaustive search",
        secs(30),
        || {
            let mut rng = substream(10, 0);
            let n_breasts = 160;
            let mut labels: Vec<bool> = (0..n_breasts).map(|i| i % 4 == 0).collect();
            labels.shuffle(&mut rng);
            let mut latent: Vec<f64> = labels
                .iter()
                .map(|&l| {
                    if l {
                        0.2 + 0.35 * rng.random::<f64>()
                    } else {
                        0.05 + 0.4 * rng.random::<f64>()
                    }
                })
                .collect();
            let positives: Vec<usize> = (0..n_breasts).filter(|&i| labels[i]).collect();
            let negatives: Vec<usize> = (0..n_breasts).filter(|&i| !labels[i]).collect();
            // Six weak models, each bumping its own negative that sits just below a positive.
            for j in 0..6 {
                latent[negatives[j]] = latent[positives[j]] - 1e-3;
            }
            let transforms: [fn(f64) -> f64; 3] = [|s| s, |s| s * s, f64::sqrt];
            let breast = |i: usize| BreastKey {
                exam_id: format!("ex{:03}", i / 2),
                laterality: if i.is_multiple_of(2) {
                    Laterality::Left
                } else {
                    Laterality::Right
                },
            };
            let mut candidates = Vec::new();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut dominant = BTreeMap::new();
            for (mi, modality) in [Modality::Ffdm, Modality::Cview, Modality::Dbt].into_iter().enumerate() {
                for v in 0..3 {
                    let id = format!("{modality}-{v}");
                    let row: Vec<f64> = (0..n_breasts)
                        .map(|i| {
                            let bump = if v > 0 && i == negatives[2 * mi + v - 1] {
                                0.2
                            } else {
                                0.0
                            };
                            transforms[mi](latent[i]) + bump
                        })
                        .collect();
                    if v == 0 {
                        dominant.insert(modality, id.clone());
                    }
                    let scores = (0..n_breasts)
                        .map(|i| {
                            let b = breast(i);
                            BreastScore {
                                exam_id: b.exam_id,
                                laterality: b.laterality,
                                model_id: id.clone(),
                                score_malignant: row[i],
                                score_benign: 0.0,
                            }
                        })
                        .collect();
                    candidates.push((ModelId::new(id, modality), scores));
                    rows.push(row);
                }
            }
            // Present candidates in a scrambled order so position cannot decide.
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.shuffle(&mut rng);
            let candidates: Vec<_> = order.iter().map(|&i| candidates[i].clone()).collect();
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
            let label_map: BTreeMap<BreastKey, bool> = (0..n_breasts).map(|i| (breast(i), labels[i])).collect();
            let cycle = [Modality::Ffdm, Modality::Cview, Modality::Dbt];
            let size = 12;
            let sel = greedy_select(&candidates, &label_map, size, Some(cycle)).map_err(|e| e.to_string())?;

            ensure!(sel.picks.len() == size, "{} picks", sel.picks.len());
            ensure!(
                sel.trajectory.windows(2).all(|w| w[1] >= w[0]),
                "trajectory decreased: {:?}",
                sel.trajectory
            );
            let mut sum = vec![0.0; n_breasts];
            for (t, pick) in sel.picks.iter().enumerate() {
                let m = cycle[t % 3];
                let ci = candidates.iter().position(|(c, _)| &c.id == pick).unwrap();
                ensure!(
                    candidates[ci].0.modality == m,
                    "slot {t} picked {pick}, alternation wants {m}"
                );
                ensure!(
                    pick == &dominant[&m],
                    "slot {t} picked {pick}, dominant is {}",
                    dominant[&m]
                );
                let k = (t + 1) as f64;
                let evals: Vec<(usize, f64)> = (0..candidates.len())
                    .filter(|&i| candidates[i].0.modality == m)
                    .map(|i| (i, mean_auroc(&sum, &rows[i], k, &labels)))
                    .collect();
                let best = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
                let argmax: Vec<usize> = evals.iter().filter(|e| e.1 == best).map(|e| e.0).collect();
                ensure!(
                    argmax == [ci],
                    "slot {t}: exhaustive search maximizers {argmax:?}, selector chose {ci}"
                );
                ensure!(
                    sel.trajectory[t] == best,
                    "slot {t}: trajectory {} vs exhaustive {best}",
                    sel.trajectory[t]
                );
                for (s, v) in sum.iter_mut().zip(&rows[ci]) {
                    *s += v;
                }
            }
            Ok(())
        },
    );
}

/// Number of C-View columns that sample an FFDM column below `ffdm_fg_cols`.
fn resized_prefix(ffdm_cols: usize, cview_cols: usize, ffdm_fg_cols: usize) -> usize {
    (0..cview_cols)
        .filter(|&c| ((2 * c + 1) * ffdm_cols) / (2 * cview_cols) < ffdm_fg_cols)
        .count()
}

struct MaskCase {
    label: String,
    ffdm: Mask,
    cview: Mask,
    expected_iou: f64,
}

fn triplet_for(case: &MaskCase, i: usize) -> Vec<TripletCandidate> {
    let exam = format!("ex{i}");
    let cand = |m: Modality, mask: Mask, id: &str| TripletCandidate {
        key: key(&exam, Laterality::Left, View::CC, m, &format!("{exam}-{id}")),
        geom: ImageGeom::planar(mask.rows(), mask.cols()),
        mask,
        acquisition_id: (m != Modality::Ffdm).then(|| format!("acq{i}")),
    };
    vec![
        cand(Modality::Ffdm, case.ffdm.clone(), "ffdm"),
        cand(Modality::Cview, case.cview.clone(), "cview"),
        cand(Modality::Dbt, Mask::new(4, 4), "dbt"),
    ]
}

fn mask_cases() -> Vec<MaskCase> {
    let thr = TRIPLET_IOU_THRESHOLD;
    let band = TRIPLET_EXCLUDE_ROWS;
    let mut pairs: Vec<((usize, usize), (usize, usize))> = HOLOGIC_RESIZE_PAIRS.to_vec();
    pairs.push(((1200, 960), (600, 480)));
    let mut out = Vec::new();
    for ((fr, fc), (cr, cc)) in pairs {
        let ffdm_fg = fc * 3 / 5;
        let ffdm = Mask::rect(fr, fc, 0, fr, 0, ffdm_fg);
        let w = resized_prefix(fc, cc, ffdm_fg);
        let narrow_ok = (thr * w as f64).ceil() as usize;
        let wide_ok = (w as f64 / thr).floor() as usize;
        for (tag, wc) in [
            ("narrow accept", narrow_ok),
            ("narrow reject", narrow_ok - 1),
            ("wide accept", wide_ok),
            ("wide reject", wide_ok + 1),
            ("exact", w),
        ] {
            let iou = wc.min(w) as f64 / wc.max(w) as f64;
            out.push(MaskCase {
                label: format!("{fr}x{fc}->{cr}x{cc} {tag}"),
                ffdm: ffdm.clone(),
                cview: Mask::rect(cr, cc, 0, cr, 0, wc),
                expected_iou: iou,
            });
        }
        // Disagreement confined to the excluded edge rows does not count.
        let mut edge = Mask::rect(cr, cc, 0, cr, 0, w);
        for r in (0..band).chain(cr - band..cr) {
            for c in w..cc {
                edge.set(r, c, true);
            }
        }
        out.push(MaskCase {
            label: format!("{fr}x{fc}->{cr}x{cc} edge rows only"),
            ffdm: ffdm.clone(),
            cview: edge.clone(),
            expected_iou: 1.0,
        });
        // The same widening reaching one row into the band is counted.
        let extra = cc - w;
        for c in w..cc {
            edge.set(band, c, true);
        }
        let inside = cr - 2 * band;
        let iou = (inside * w) as f64 / (inside * w + extra) as f64;
        out.push(MaskCase {
            label: format!("{fr}x{fc}->{cr}x{cc} band row"),
            ffdm: ffdm.clone(),
            cview: edge,
            expected_iou: iou,
        });
        // A detached blob in the band is dropped by the component filter.
        let mut blob = Mask::rect(cr, cc, 0, cr, 0, w);
        let side = ((cr - 2 * band) / 3).min(cc - w - 2);
        for r in cr / 3..cr / 3 + side {
            for c in w + 2..w + 2 + side.min(cc - w - 2) {
                blob.set(r, c, true);
            }
        }
        out.push(MaskCase {
            label: format!("{fr}x{fc}->{cr}x{cc} detached blob"),
            ffdm,
            cview: blob,
            expected_iou: 1.0,
        });
    }
    out
}

#[test]
fn c11_triplet_matching() {
    criterion(
        11,
        "triplet matching accepts and rejects exactly around the IoU threshold",
        secs(5),
        || {
            let cases = mask_cases();
            let mut straddle = (false, false);
            for (i, case) in cases.iter().enumerate() {
                let report = match_triplets(&triplet_for(case, i)).map_err(|e| e.to_string())?;
                let accept = case.expected_iou >= TRIPLET_IOU_THRESHOLD;
                if (case.expected_iou - TRIPLET_IOU_THRESHOLD).abs() < 2e-3 {
                    if accept {
                        straddle.0 = true;
                    } else {
                        straddle.1 = true;
                    }
                }
                ensure!(
                    report.matches.len() == accept as usize,
                    "{}: IoU {:.6} gave {} matches",
                    case.label,
                    case.expected_iou,
                    report.matches.len()
                );
                if let Some(m) = report.matches.first() {
                    ensure!(
                        (m.iou - case.expected_iou).abs() < 1e-12,
                        "{}: matched IoU {} vs expected {}",
                        case.label,
                        m.iou,
                        case.expected_iou
                    );
                }
            }
            ensure!(straddle.0 && straddle.1, "suite does not straddle the threshold");

            // An FFDM whose aspect fits no resize rule is never paired.
            let odd = MaskCase {
                label: "aspect mismatch".into(),
                ffdm: Mask::rect(1000, 960, 0, 1000, 0, 576),
                cview: Mask::rect(600, 480, 0, 600, 0, 288),
                expected_iou: 0.0,
            };
            let report = match_triplets(&triplet_for(&odd, 99)).map_err(|e| e.to_string())?;
            ensure!(
                report.matches.is_empty() && !report.warnings.is_empty(),
                "aspect mismatch was paired"
            );
            // Hologic dimensions paired with the wrong C-View size are refused.
            let (from, _) = HOLOGIC_RESIZE_PAIRS[0];
            let (_, other) = HOLOGIC_RESIZE_PAIRS[1];
            let wrong = MaskCase {
                label: "hologic wrong target".into(),
                ffdm: Mask::rect(from.0, from.1, 0, from.0, 0, from.1 / 2),
                cview: Mask::rect(other.0, other.1, 0, other.0, 0, other.1 / 2),
                expected_iou: 0.0,
            };
            let report = match_triplets(&triplet_for(&wrong, 100)).map_err(|e| e.to_string())?;
            ensure!(
                report.matches.is_empty(),
                "Hologic FFDM paired with a non-matching C-View size"
            );
            Ok(())
        },
    );
}

fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn c12_head_numerics() {
    criterion(
        12,
        "gated attention matches a direct transcription; loss indicator truth table",
        secs(10),
        || {
            for trial in 0..1000u64 {
                let mut rng = substream(12, trial);
                let (k, s, l) = (
                    rng.random_range(1..=12usize),
                    rng.random_range(1..=16usize),
                    rng.random_range(1..=8usize),
                );
                let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.5..1.5)).collect() };
                let w = draw(l);
                let v = draw(l * s);
                let u = draw(l * s);
                let q: Vec<Vec<f64>> = (0..k).map(|_| draw(s)).collect();

                let logits: Vec<f64> = q
                    .iter()
                    .map(|qk| {
                        let mut total = 0.0;
                        for row in 0..l {
                            let mut vq = 0.0;
                            let mut uq = 0.0;
                            for col in 0..s {
                                vq += v[row * s + col] * qk[col];
                                uq += u[row * s + col] * qk[col];
                            }
                            total += w[row] * vq.tanh() * sigmoid_ref(uq);
                        }
                        total
                    })
                    .collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                let want: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();

                let params = AttentionParams::new(
                    Array1::from(w),
                    Array2::from_shape_vec((l, s), v).unwrap(),
                    Array2::from_shape_vec((l, s), u).unwrap(),
                )
                .map_err(|e| e.to_string())?;
                let qa: Vec<Array1<f64>> = q.into_iter().map(Array1::from).collect();
                let alpha = gated_attention(&qa, &params).map_err(|e| e.to_string())?;
                let sum: f64 = alpha.iter().sum();
                ensure!((sum - 1.0).abs() <= 1e-9, "instance {trial}: weights sum to {sum}");
                ensure!(alpha.iter().all(|&a| a >= 0.0), "instance {trial}: negative weight");
                for (a, b) in alpha.iter().zip(&want) {
                    ensure!((a - b).abs() <= 1e-12, "instance {trial}: {a} vs transcription {b}");
                }
            }

            let y_hat = ImagePrediction {
                y_malignant: 0.7,
                y_benign: 0.2,
            };
            for n_boxes in 0..=2usize {
                for ym in [0.0, 1.0] {
                    for yb in [0.0, 1.0] {
                        let labels = [ym, yb];
                        let want = n_boxes != 0 || ym + yb < 1.0;
                        ensure!(
                            detection_loss_applies(n_boxes, labels) == want,
                            "indicator wrong for S={n_boxes}, y={labels:?}"
                        );
                        let lb =
                            compose_loss(Some(0.3), &y_hat, labels, 0.5, n_boxes, 10.0).map_err(|e| e.to_string())?;
                        ensure!(
                            lb.detection_term.is_some() == want,
                            "loss term presence wrong for S={n_boxes}, y={labels:?}"
                        );
                        let expected_total = lb.detection_term.unwrap_or(0.0) + lb.bce_term + lb.consistency_term;
                        ensure!(lb.total == expected_total, "total is not the sum of included terms");
                        let skipped = compose_loss(None, &y_hat, labels, 0.5, n_boxes, 10.0);
                        ensure!(
                            skipped.is_ok() == !want,
                            "missing detection loss handled wrongly for S={n_boxes}, y={labels:?}"
                        );
                    }
                }
            }
            Ok(())
        },
    );
}
