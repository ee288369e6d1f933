//! Subcommand implementations. Each one turns files into a [`Report`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::Serialize;
use serde_json::Value;

use crate::cli::config::RunConfig;
use crate::cli::hparam::hparam_sample;
use crate::cli::io::{
    ingest, read_grids, read_gt, read_labels, read_masks, read_predictions, read_timeline, write_csv, write_ndjson,
    Dataset, GridRecord, LabelRow, PredictionRecord, TimelineRow, WireBox,
};
use crate::cli::report::{num, opt, text, Report, Table};
use crate::cli::synth::{synth_generate, SynthConfig};
use crate::cli::{AggregateMode, Command, PermMetric, StatsCommand};
use crate::cohort::{filter_test_set_with, rule_histogram};
use crate::detect::{ensemble_boxes_multimodal_at, match_triplets_at, mss, nms_boxes, to_shared_space, SliceStack};
use crate::ensemble::{
    breast_score, default_percentile_grid, ensemble_breasts, greedy_select, max_safe_rejection, operating_point,
    recall_savings_curve, triage, triage_counts, BreastScore, ExamOutcome, ModelId, Selection,
};
use crate::error::{Error, Result};
use crate::geometry::{BreastKey, DetBox, ImageKey, Laterality, Modality, Target};
use crate::head::{
    dbt_image_prediction, predict_2d, AttentionParams, FeatureGrid, HeadParams, ImageHead, ImagePrediction, TopKConfig,
};
use crate::metrics::{aufroc1, sensitivity_at_fp, EvalImage, FrocData, ScoredCase};
use crate::stats::{
    bootstrap_ci, cohens_h, permutation_test, permutation_test_froc, reduction_of_error, sample_size, two_prop_ztest,
    PairedPredictions,
};

/// Resolved settings shared by every command.
pub struct Ctx {
    pub cfg: RunConfig,
    /// Explicit `--iou`, overriding the command's configured threshold.
    pub iou: Option<f64>,
}

fn ser<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn need(arg: &Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone().or_else(|| fallback.clone()).ok_or_else(|| {
        Error::Config(format!(
            "missing --{flag} (or paths.{} in the config)",
            flag.replace('-', "_")
        ))
    })
}

fn model_filter(records: Vec<PredictionRecord>, models: &[String]) -> Vec<PredictionRecord> {
    if models.is_empty() {
        records
    } else {
        records.into_iter().filter(|r| models.contains(&r.model_id)).collect()
    }
}

/// Breast scores per model: mean image scores over the breast's images.
pub fn breast_scores(records: &[PredictionRecord]) -> Result<Vec<BreastScore>> {
    let mut grouped: BTreeMap<(String, BreastKey), Vec<ImagePrediction>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.model_id.clone(), r.breast()))
            .or_default()
            .push(ImagePrediction {
                y_malignant: r.image_scores[0],
                y_benign: r.image_scores[1],
            });
    }
    grouped
        .iter()
        .map(|((model, breast), preds)| breast_score(breast, model, preds))
        .collect()
}

fn label_map(rows: &[LabelRow]) -> BTreeMap<BreastKey, &LabelRow> {
    rows.iter().map(|r| (r.breast(), r)).collect()
}

fn cases_for(model: &str, scores: &[BreastScore], labels: &BTreeMap<BreastKey, &LabelRow>) -> Result<Vec<ScoredCase>> {
    scores
        .iter()
        .filter(|s| s.model_id == model)
        .map(|s| {
            let k = s.breast();
            let l = labels
                .get(&k)
                .ok_or_else(|| Error::invalid(format!("breast {k} has predictions but no label row")))?;
            Ok(ScoredCase::new(k.to_string(), s.score_malignant, l.malignant == 1))
        })
        .collect()
}

fn model_ids(records: &[PredictionRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.model_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn eval_images(records: &[PredictionRecord], model: &str) -> Result<Vec<EvalImage>> {
    let mut images: Vec<EvalImage> = records
        .iter()
        .filter(|r| r.model_id == model)
        .map(|r| {
            Ok(EvalImage {
                key: r.key(),
                n_slices: r.n_slices,
                predictions: r.det_boxes()?,
            })
        })
        .collect::<Result<_>>()?;
    images.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(images)
}

fn froc_data(records: &[PredictionRecord], gt_path: &Path, model: &str) -> Result<FrocData> {
    let images = eval_images(records, model)?;
    let keys: BTreeSet<&ImageKey> = images.iter().map(|i| &i.key).collect();
    let gts = read_gt(gt_path)?
        .iter()
        .map(|g| g.to_gt())
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|g| keys.contains(&g.image))
        .collect::<Vec<_>>();
    FrocData::build(&images, &gts)
}

fn box_row(model: &str, image: &str, b: &DetBox) -> Vec<Value> {
    vec![
        text(model),
        text(image),
        ser(&b.origin),
        b.slice.map_or(Value::Null, Value::from),
        num(b.geom.cx),
        num(b.geom.cy),
        num(b.geom.w),
        num(b.geom.h),
        num(b.score_malignant),
        num(b.score_benign),
    ]
}

const BOX_COLUMNS: [&str; 10] = [
    "model_id", "image_id", "origin", "slice", "cx", "cy", "w", "h", "s_m", "s_b",
];

/// DBT grid records grouped into slice stacks, keyed by `(model_id, image_id)`.
fn grid_stacks(grids: &[GridRecord]) -> Result<BTreeMap<(String, String), Vec<&GridRecord>>> {
    let mut out: BTreeMap<(String, String), Vec<&GridRecord>> = BTreeMap::new();
    for g in grids {
        out.entry((g.model_id.clone(), g.image_id.clone())).or_default().push(g);
    }
    for ((model, image), recs) in out.iter_mut() {
        recs.sort_by_key(|g| g.slice);
        let modality = recs[0].modality;
        let contiguous = recs.iter().enumerate().all(|(i, g)| g.slice.unwrap_or(0) as usize == i);
        if modality == Modality::Dbt && !contiguous {
            return Err(Error::invalid(format!(
                "DBT grids of {model}/{image} must cover slices 0..n once each"
            )));
        }
        if modality != Modality::Dbt && recs.len() != 1 {
            return Err(Error::invalid(format!(
                "{} grids for 2D image {model}/{image}",
                recs.len()
            )));
        }
    }
    Ok(out)
}

fn feature_grid(g: &GridRecord) -> Result<FeatureGrid> {
    let dim = g.cells.first().map_or(0, |c| c.features.len());
    if dim == 0 {
        return Err(Error::invalid(format!("grid {} has no feature vectors", g.image_id)));
    }
    let flat: Vec<f64> = g.cells.iter().flat_map(|c| c.features.iter().copied()).collect();
    let values = Array3::from_shape_vec((g.grid_h, g.grid_w, dim), flat).map_err(|e| Error::shape(e.to_string()))?;
    FeatureGrid::new(values)
}

fn load_head(path: &Path) -> Result<ImageHead> {
    let raw: ImageHead = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let a = raw.attention;
    ImageHead::new(AttentionParams::new(a.w, a.v, a.u)?, HeadParams::new(raw.head.w_image)?)
}

struct Ensembled {
    records: Vec<PredictionRecord>,
    scores: BTreeMap<BreastKey, f64>,
}

fn ensembled(path: &Path, models: &[String]) -> Result<Ensembled> {
    let records = model_filter(read_predictions(path)?, models);
    let scores = breast_scores(&records)?;
    let selection = Selection::from_ids(model_ids(&records));
    Ok(Ensembled {
        scores: ensemble_breasts(&scores, &selection)?.into_iter().collect(),
        records,
    })
}

fn exam_scores(e: &Ensembled) -> Result<Vec<(String, f64, f64)>> {
    let exams: BTreeSet<&str> = e.records.iter().map(|r| r.exam_id.as_str()).collect();
    exams
        .into_iter()
        .map(|exam| {
            let get = |lat: Laterality| {
                let k = BreastKey {
                    exam_id: exam.to_string(),
                    laterality: lat,
                };
                e.scores
                    .get(&k)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("exam {exam} has no score for breast {k}")))
            };
            Ok((exam.to_string(), get(Laterality::Left)?, get(Laterality::Right)?))
        })
        .collect()
}

pub fn execute(command: &Command, ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let paths = &cfg.paths;
    match command {
        Command::Aggregate {
            predictions,
            grids,
            mode,
            target,
            write_predictions,
        } => {
            let target: Target = *target;
            let mut table = Table::new("boxes", &BOX_COLUMNS);
            match mode {
                AggregateMode::Nms => {
                    let iou = ctx.iou.unwrap_or(cfg.nms_iou);
                    let recs = read_predictions(&need(predictions, &paths.predictions, "predictions")?)?;
                    let mut kept = Vec::with_capacity(recs.len());
                    for r in &recs {
                        let boxes = nms_boxes(&r.det_boxes()?, target, iou);
                        for b in &boxes {
                            table.push(box_row(&r.model_id, &r.image_id, b));
                        }
                        let mut out = r.clone();
                        out.boxes = boxes.iter().map(WireBox::from_det).collect();
                        kept.push(out);
                    }
                    if let Some(p) = write_predictions {
                        write_ndjson(p, &kept)?;
                    }
                }
                AggregateMode::Mss => {
                    if write_predictions.is_some() {
                        return Err(Error::Config("--write-predictions applies to --mode nms only".into()));
                    }
                    let iou = ctx.iou.unwrap_or(cfg.nms_iou);
                    let grids = read_grids(
                        grids
                            .as_deref()
                            .ok_or_else(|| Error::Config("mss needs --grids".into()))?,
                    )?;
                    for ((model, image), recs) in grid_stacks(&grids)? {
                        if recs[0].modality != Modality::Dbt {
                            continue;
                        }
                        let stack = SliceStack::new(recs.iter().map(|g| g.score_grid()).collect::<Result<_>>()?)?;
                        for b in mss(&stack, target, iou) {
                            table.push(box_row(&model, &image, &b));
                        }
                    }
                }
                AggregateMode::Multimodal => {
                    if write_predictions.is_some() {
                        return Err(Error::Config("--write-predictions applies to --mode nms only".into()));
                    }
                    let iou = ctx.iou.unwrap_or(cfg.multimodal_iou);
                    let recs = read_predictions(&need(predictions, &paths.predictions, "predictions")?)?;
                    let mut groups: BTreeMap<(String, Laterality, String), Vec<&PredictionRecord>> = BTreeMap::new();
                    for r in &recs {
                        groups
                            .entry((r.exam_id.clone(), r.laterality, format!("{:?}", r.view)))
                            .or_default()
                            .push(r);
                    }
                    table = Table::new(
                        "multimodal_boxes",
                        &[
                            "exam_id",
                            "laterality",
                            "view",
                            "origin",
                            "slice",
                            "cx",
                            "cy",
                            "w",
                            "h",
                            "s_m",
                            "s_b",
                            "dbt_displayable",
                        ],
                    );
                    for ((exam, lat, view), group) in groups {
                        let target_geom = group
                            .iter()
                            .find(|r| r.modality == Modality::Cview)
                            .and_then(|r| r.geom())
                            .ok_or_else(|| {
                                Error::invalid(format!("{exam}/{lat}/{view}: no C-View image with rows/cols"))
                            })?;
                        let mut per_modality: BTreeMap<Modality, Vec<DetBox>> = BTreeMap::new();
                        for r in &group {
                            let geom = r
                                .geom()
                                .ok_or_else(|| Error::invalid(format!("image {} lacks rows/cols", r.image_id)))?;
                            per_modality.entry(r.modality).or_default().extend(to_shared_space(
                                &r.det_boxes()?,
                                &geom,
                                &target_geom,
                            ));
                        }
                        let ens = ensemble_boxes_multimodal_at(&per_modality, target, iou);
                        for b in &ens.unified {
                            let displayable = ens
                                .dbt_displayable
                                .iter()
                                .find(|d| d.geom == b.geom && d.origin == b.origin);
                            table.push(vec![
                                text(exam.clone()),
                                ser(&lat),
                                text(view.clone()),
                                ser(&b.origin),
                                displayable.and_then(|d| d.slice).map_or(Value::Null, Value::from),
                                num(b.geom.cx),
                                num(b.geom.cy),
                                num(b.geom.w),
                                num(b.geom.h),
                                num(b.score_malignant),
                                num(b.score_benign),
                                Value::Bool(displayable.is_some()),
                            ]);
                        }
                    }
                }
            }
            Ok(Report::default().with(table))
        }

        Command::PredictHead {
            grids,
            head,
            k,
            global_pool,
        } => {
            let model = load_head(head)?;
            let topk = TopKConfig {
                k: k.unwrap_or(cfg.top_k),
                nms_threshold: ctx.iou.unwrap_or(cfg.nms_iou),
                include_global_pool: *global_pool || cfg.include_global_pool,
            };
            let grids = read_grids(grids)?;
            let mut table = Table::new(
                "image_predictions",
                &[
                    "model_id",
                    "image_id",
                    "modality",
                    "y_malignant",
                    "y_benign",
                    "n_boxes",
                    "short",
                ],
            );
            for ((model_id, image), recs) in grid_stacks(&grids)? {
                let modality = recs[0].modality;
                let features = recs.iter().map(|g| feature_grid(g)).collect::<Result<Vec<_>>>()?;
                let out = if modality == Modality::Dbt {
                    let stack = SliceStack::new(recs.iter().map(|g| g.score_grid()).collect::<Result<_>>()?)?;
                    dbt_image_prediction(&stack, &features, &topk, &model)?
                } else {
                    predict_2d(&recs[0].score_grid()?, modality, &features[0], &topk, &model)?
                };
                table.push(vec![
                    text(model_id),
                    text(image),
                    ser(&modality),
                    num(out.prediction.y_malignant),
                    num(out.prediction.y_benign),
                    Value::from(out.topk.boxes.len()),
                    Value::Bool(out.topk.is_short()),
                ]);
            }
            Ok(Report::default().with(table))
        }

        Command::Evaluate {
            predictions,
            labels,
            gt,
            models,
            n_bootstrap,
        } => {
            let recs = model_filter(
                read_predictions(&need(predictions, &paths.predictions, "predictions")?)?,
                models,
            );
            let label_rows = read_labels(&need(labels, &paths.labels, "labels")?)?;
            let lmap = label_map(&label_rows);
            let scores = breast_scores(&recs)?;
            let n_boot = n_bootstrap.unwrap_or(cfg.bootstrap_resamples);
            let mut cls = Table::new(
                "classification",
                &[
                    "model_id",
                    "n_breasts",
                    "n_positive",
                    "auroc",
                    "auroc_lo",
                    "auroc_hi",
                    "auprc",
                    "auprc_lo",
                    "auprc_hi",
                ],
            );
            for model in model_ids(&recs) {
                let cases = cases_for(&model, &scores, &lmap)?;
                let mut row = vec![
                    text(model.clone()),
                    Value::from(cases.len()),
                    Value::from(cases.iter().filter(|c| c.label).count()),
                ];
                for metric in [crate::stats::ClassMetric::Auroc, crate::stats::ClassMetric::Auprc] {
                    let point = metric.eval(&cases).ok();
                    let ci = point.and_then(|_| bootstrap_ci(&cases, |c| metric.eval(c), n_boot, cfg.seed).ok());
                    row.extend([opt(point), opt(ci.map(|c| c.lo)), opt(ci.map(|c| c.hi))]);
                }
                cls.push(row);
            }
            let mut report = Report::default().with(cls);
            if let Some(gt_path) = gt.clone().or_else(|| paths.gt_boxes.clone()) {
                let level = cfg.level;
                let mut summary = Table::new(
                    "froc_summary",
                    &[
                        "model_id",
                        "level",
                        "n_images",
                        "aufroc1",
                        "sens_at_0.25",
                        "sens_at_0.5",
                        "sens_at_1",
                    ],
                );
                let mut points = Table::new("froc_points", &["model_id", "threshold", "fp_per_image", "sensitivity"]);
                for model in model_ids(&recs) {
                    let data = froc_data(&recs, &gt_path, &model)?;
                    let curve = data.curve(level)?;
                    summary.push(vec![
                        text(model.clone()),
                        ser(&level),
                        Value::from(curve.n_images),
                        num(aufroc1(&curve)),
                        num(sensitivity_at_fp(&curve, 0.25)),
                        num(sensitivity_at_fp(&curve, 0.5)),
                        num(sensitivity_at_fp(&curve, 1.0)),
                    ]);
                    for p in &curve.points {
                        points.push(vec![
                            text(model.clone()),
                            opt(p.threshold),
                            num(p.fp_per_image),
                            num(p.sensitivity),
                        ]);
                    }
                }
                report = report.with(summary).with(points);
            }
            Ok(report)
        }

        Command::Stats { command } => stats(command, ctx),

        Command::SelectEnsemble {
            predictions,
            labels,
            size,
            no_alternation,
        } => {
            let recs = read_predictions(&need(predictions, &paths.predictions, "predictions")?)?;
            let label_rows = read_labels(&need(labels, &paths.labels, "labels")?)?;
            let labels: BTreeMap<BreastKey, bool> = label_rows.iter().map(|r| (r.breast(), r.malignant == 1)).collect();
            let scores = breast_scores(&recs)?;
            let mut modality_of: BTreeMap<&str, Modality> = BTreeMap::new();
            for r in &recs {
                if let Some(&m) = modality_of.get(r.model_id.as_str()) {
                    if m != r.modality {
                        return Err(Error::invalid(format!(
                            "model {} scores more than one modality",
                            r.model_id
                        )));
                    }
                }
                modality_of.insert(&r.model_id, r.modality);
            }
            let candidates: Vec<(ModelId, Vec<BreastScore>)> = modality_of
                .iter()
                .map(|(&id, &m)| {
                    (
                        ModelId::new(id, m),
                        scores.iter().filter(|s| s.model_id == id).cloned().collect(),
                    )
                })
                .collect();
            let alternation = if *no_alternation {
                None
            } else {
                Some(cfg.alternation_order()?)
            };
            let sel = greedy_select(&candidates, &labels, size.unwrap_or(cfg.ensemble_size), alternation)?;
            let mut steps = Table::new("selection_steps", &["step", "model_id", "modality", "auroc"]);
            for (i, (id, auc)) in sel.picks.iter().zip(&sel.trajectory).enumerate() {
                steps.push(vec![
                    Value::from(i + 1),
                    text(id.clone()),
                    ser(&modality_of[id.as_str()]),
                    num(*auc),
                ]);
            }
            let mut counts = Table::new("selection", &["model_id", "count"]);
            for (id, c) in &sel.selection.counts {
                counts.push(vec![text(id.clone()), Value::from(*c)]);
            }
            Ok(Report::default().with(steps).with(counts))
        }

        Command::Triage {
            predictions,
            labels,
            models,
            calibration_predictions,
            calibration_labels,
        } => {
            let test = ensembled(&need(predictions, &paths.predictions, "predictions")?, models)?;
            let calib = match calibration_predictions {
                Some(p) => ensembled(p, models)?,
                None => ensembled(&need(predictions, &paths.predictions, "predictions")?, models)?,
            };
            let calib_labels = read_labels(&match calibration_labels {
                Some(p) => p.clone(),
                None => need(labels, &paths.labels, "labels")?,
            })?;
            let lmap = label_map(&calib_labels);
            let (mut s, mut l) = (Vec::new(), Vec::new());
            for (k, &score) in &calib.scores {
                let row = lmap
                    .get(k)
                    .ok_or_else(|| Error::invalid(format!("calibration breast {k} has no label row")))?;
                s.push(score);
                l.push(row.malignant == 1);
            }
            let margin = cfg.margin_percentiles;
            let op = operating_point(&s, &l, margin)?;
            let mut opt_table = Table::new(
                "operating_point",
                &[
                    "base_threshold",
                    "base_percentile",
                    "margin_percentiles",
                    "final_percentile",
                    "threshold",
                ],
            );
            opt_table.push(vec![
                num(op.base_threshold),
                num(op.base_percentile),
                num(margin),
                num(op.final_percentile),
                num(op.threshold),
            ]);
            let results: Vec<_> = exam_scores(&test)?
                .into_iter()
                .map(|(exam, left, right)| (left, right, triage(&exam, left, right, op.threshold)))
                .collect();
            let mut per_exam = Table::new(
                "triage",
                &["exam_id", "left_score", "right_score", "left", "right", "category"],
            );
            for (left, right, r) in &results {
                per_exam.push(vec![
                    text(r.exam_id.clone()),
                    num(*left),
                    num(*right),
                    ser(&r.left),
                    ser(&r.right),
                    ser(&r.category),
                ]);
            }
            let mut counts = Table::new("triage_counts", &["category", "count"]);
            let only: Vec<_> = results.into_iter().map(|(_, _, r)| r).collect();
            for (c, n) in triage_counts(&only) {
                counts.push(vec![ser(&c), Value::from(n)]);
            }
            Ok(Report::default().with(opt_table).with(per_exam).with(counts))
        }

        Command::RecallSavings {
            predictions,
            labels,
            models,
            step,
        } => {
            let e = ensembled(&need(predictions, &paths.predictions, "predictions")?, models)?;
            let label_rows = read_labels(&need(labels, &paths.labels, "labels")?)?;
            let mut exam_truth: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
            for r in &label_rows {
                let t = exam_truth.entry(r.exam_id.as_str()).or_default();
                t.0 |= r.malignant == 1;
                t.1 |= r.recalled == Some(1);
            }
            let exams: Vec<ExamOutcome> = exam_scores(&e)?
                .into_iter()
                .map(|(exam, left, right)| {
                    let &(cancer, recalled) = exam_truth
                        .get(exam.as_str())
                        .ok_or_else(|| Error::invalid(format!("exam {exam} has no label rows")))?;
                    Ok(ExamOutcome {
                        exam_id: exam,
                        left,
                        right,
                        cancer,
                        recalled,
                    })
                })
                .collect::<Result<_>>()?;
            let grid = match step {
                Some(s) if *s > 0.0 => {
                    let n = (100.0 / s).floor() as usize;
                    (0..=n).map(|i| i as f64 * s).collect()
                }
                Some(s) => return Err(Error::Config(format!("--step {s} must be positive"))),
                None => default_percentile_grid(),
            };
            let rows = recall_savings_curve(&exams, &grid);
            let mut full = Table::new(
                "recall_savings",
                &[
                    "percentile",
                    "threshold",
                    "sensitivity",
                    "false_negative_rate",
                    "specificity",
                    "false_positive_rate",
                    "fraction_recalls_saved",
                    "fraction_workload_saved",
                ],
            );
            let mut a = Table::new(
                "panel_a_sensitivity",
                &["percentile", "sensitivity", "false_negative_rate"],
            );
            let mut b = Table::new(
                "panel_b_specificity",
                &["percentile", "specificity", "false_positive_rate"],
            );
            let mut c = Table::new("panel_c_recalls_saved", &["percentile", "fraction_recalls_saved"]);
            for r in &rows {
                full.push(vec![
                    num(r.percentile),
                    num(r.threshold),
                    opt(r.sensitivity),
                    opt(r.fnr),
                    opt(r.specificity),
                    opt(r.fpr),
                    opt(r.fraction_recalls_saved),
                    num(r.fraction_workload_saved),
                ]);
                a.push(vec![num(r.percentile), opt(r.sensitivity), opt(r.fnr)]);
                b.push(vec![num(r.percentile), opt(r.specificity), opt(r.fpr)]);
                c.push(vec![num(r.percentile), opt(r.fraction_recalls_saved)]);
            }
            let mut best = Table::new(
                "max_safe_rejection",
                &[
                    "percentile",
                    "threshold",
                    "fraction_workload_saved",
                    "fraction_recalls_saved",
                ],
            );
            if let Ok(m) = max_safe_rejection(&exams) {
                best.push(vec![
                    num(m.percentile),
                    num(m.threshold),
                    num(m.fraction_workload_saved),
                    opt(m.fraction_recalls_saved),
                ]);
            }
            Ok(Report::default().with(full).with(a).with(b).with(c).with(best))
        }

        Command::CohortFilter { timeline, rule_order } => {
            let t = read_timeline(&need(timeline, &paths.timeline, "timeline")?)?;
            let order = if rule_order.is_empty() {
                crate::cohort::DEFAULT_RULE_ORDER.to_vec()
            } else {
                rule_order.clone()
            };
            let outcomes = filter_test_set_with(&t, &order)?;
            let mut table = Table::new("filter_outcomes", &["exam_id", "included", "rule", "assignment"]);
            for o in &outcomes {
                table.push(vec![
                    text(o.exam_id.clone()),
                    Value::Bool(o.included),
                    ser(&o.rule),
                    ser(&o.assignment),
                ]);
            }
            let mut hist = Table::new("rule_histogram", &["rule", "count"]);
            for (r, n) in rule_histogram(&outcomes) {
                hist.push(vec![ser(&r), Value::from(n)]);
            }
            Ok(Report::default().with(table).with(hist))
        }

        Command::MatchTriplets {
            masks,
            threshold,
            exclude_rows,
        } => {
            let recs = read_masks(&need(masks, &paths.masks, "masks")?)?;
            let candidates = recs.iter().map(|m| m.candidate()).collect::<Result<Vec<_>>>()?;
            let report = match_triplets_at(
                &candidates,
                threshold.or(ctx.iou).unwrap_or(cfg.triplet_iou),
                exclude_rows.unwrap_or(crate::detect::TRIPLET_EXCLUDE_ROWS),
            )?;
            let mut table = Table::new(
                "triplets",
                &[
                    "exam_id",
                    "laterality",
                    "view",
                    "ffdm_image_id",
                    "cview_image_id",
                    "dbt_image_id",
                    "iou",
                ],
            );
            for m in &report.matches {
                table.push(vec![
                    text(m.ffdm.exam_id.clone()),
                    ser(&m.ffdm.laterality),
                    ser(&m.ffdm.view),
                    text(m.ffdm.image_id.clone()),
                    text(m.cview.image_id.clone()),
                    text(m.dbt.image_id.clone()),
                    num(m.iou),
                ]);
            }
            let mut warnings = Table::new("match_warnings", &["image_id", "message"]);
            for w in &report.warnings {
                warnings.push(vec![text(w.image_id.clone()), text(w.message.clone())]);
            }
            Ok(Report::default().with(table).with(warnings))
        }

        Command::Synth {
            dir,
            n_exams,
            prevalence,
            modalities,
            lesion_min,
            lesion_max,
            models_per_modality,
            n_slices,
        } => {
            let d = SynthConfig::default();
            let cfg_s = SynthConfig {
                n_exams: n_exams.unwrap_or(d.n_exams),
                prevalence: prevalence.unwrap_or(d.prevalence),
                modalities: if modalities.is_empty() {
                    d.modalities.clone()
                } else {
                    modalities.clone()
                },
                lesion_size: (
                    lesion_min.unwrap_or(d.lesion_size.0),
                    lesion_max.unwrap_or(d.lesion_size.1),
                ),
                models_per_modality: models_per_modality.unwrap_or(d.models_per_modality),
                n_slices: n_slices.unwrap_or(d.n_slices),
                seed: cfg.seed,
                ..d
            };
            let ds = synth_generate(&cfg_s)?;
            ds.write_to(dir)?;
            let mut table = Table::new("synth_files", &["file", "records"]);
            for (f, n) in [
                (crate::cli::synth::PREDICTIONS_FILE, ds.predictions.len()),
                (crate::cli::synth::GT_FILE, ds.gt.len()),
                (crate::cli::synth::LABELS_FILE, ds.labels.len()),
                (crate::cli::synth::TIMELINE_FILE, ds.timeline.len()),
                (crate::cli::synth::MASKS_FILE, ds.masks.len()),
                (crate::cli::synth::GRIDS_FILE, ds.grids.len()),
                (crate::cli::synth::HEAD_FILE, 1),
            ] {
                table.push(vec![text(dir.join(f).display().to_string()), Value::from(n)]);
            }
            Ok(Report::default().with(table))
        }

        Command::HparamSample { version, modality, n } => {
            let mut table = Table::new(
                "hparams",
                &[
                    "version",
                    "modality",
                    "learning_rate",
                    "weight_decay",
                    "momentum",
                    "top_k",
                    "architecture",
                    "image_height",
                ],
            );
            for h in hparam_sample(*version, *modality, *n, cfg.seed) {
                table.push(vec![
                    ser(&h.version),
                    ser(&h.modality),
                    num(h.learning_rate),
                    num(h.weight_decay),
                    num(h.momentum),
                    Value::from(h.top_k),
                    ser(&h.architecture),
                    Value::from(h.image_height),
                ]);
            }
            Ok(Report::default().with(table))
        }

        Command::Ingest { schema, path, emit } => {
            let ds = ingest(path, *schema)?;
            if let Some(out) = emit {
                match &ds {
                    Dataset::Predictions(r) => write_ndjson(out, r)?,
                    Dataset::GtBoxes(r) => write_ndjson(out, r)?,
                    Dataset::Masks(r) => write_ndjson(out, r)?,
                    Dataset::Grids(r) => write_ndjson(out, r)?,
                    Dataset::Labels(r) => write_csv(out, r)?,
                    Dataset::Timeline(t) => {
                        let rows: Vec<TimelineRow> = t
                            .exams
                            .iter()
                            .map(TimelineRow::from_exam)
                            .chain(t.pathology.iter().map(TimelineRow::from_pathology))
                            .collect();
                        write_csv(out, &rows)?
                    }
                }
            }
            let mut table = Table::new("ingest", &["path", "schema", "records"]);
            table.push(vec![
                text(path.display().to_string()),
                text(format!("{schema:?}").to_lowercase()),
                Value::from(ds.len()),
            ]);
            Ok(Report::default().with(table))
        }
    }
}

fn stats(command: &StatsCommand, ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    let paths = &cfg.paths;
    let one = |name: &str, cols: &[&str], row: Vec<Value>| {
        let mut t = Table::new(name, cols);
        t.push(row);
        Ok(Report::default().with(t))
    };
    match command {
        StatsCommand::Permtest {
            predictions,
            labels,
            gt,
            model_a,
            model_b,
            metric,
            n_iter,
        } => {
            let recs = read_predictions(&need(predictions, &paths.predictions, "predictions")?)?;
            let n = n_iter.unwrap_or(cfg.permutation_iters);
            let res = match metric {
                PermMetric::Froc => {
                    let gt_path = need(gt, &paths.gt_boxes, "gt")?;
                    let a = froc_data(&recs, &gt_path, model_a)?;
                    let b = froc_data(&recs, &gt_path, model_b)?;
                    permutation_test_froc(&a, &b, cfg.level, n, cfg.seed)?
                }
                PermMetric::Auroc | PermMetric::Auprc => {
                    let label_rows = read_labels(&need(labels, &paths.labels, "labels")?)?;
                    let lmap = label_map(&label_rows);
                    let scores = breast_scores(&recs)?;
                    let data = PairedPredictions::align(
                        &cases_for(model_a, &scores, &lmap)?,
                        &cases_for(model_b, &scores, &lmap)?,
                    )?;
                    let m = if *metric == PermMetric::Auroc {
                        crate::stats::ClassMetric::Auroc
                    } else {
                        crate::stats::ClassMetric::Auprc
                    };
                    permutation_test(&data, m, n, cfg.seed)?
                }
            };
            one(
                "permutation_test",
                &[
                    "metric",
                    "model_a",
                    "model_b",
                    "observed_difference",
                    "p_value",
                    "n_iter",
                    "seed",
                ],
                vec![
                    ser(metric),
                    text(model_a.clone()),
                    text(model_b.clone()),
                    num(res.statistic),
                    num(res.p_value),
                    Value::from(n),
                    Value::from(cfg.seed),
                ],
            )
        }
        StatsCommand::Bootstrap {
            predictions,
            labels,
            model,
            metric,
            n,
        } => {
            let recs = read_predictions(&need(predictions, &paths.predictions, "predictions")?)?;
            let label_rows = read_labels(&need(labels, &paths.labels, "labels")?)?;
            let cases = cases_for(model, &breast_scores(&recs)?, &label_map(&label_rows))?;
            let metric = metric.unwrap_or(cfg.metric);
            let point = metric.eval(&cases)?;
            let ci = bootstrap_ci(
                &cases,
                |c| metric.eval(c),
                n.unwrap_or(cfg.bootstrap_resamples),
                cfg.seed,
            )?;
            one(
                "bootstrap",
                &["model_id", "metric", "estimate", "ci_lo", "ci_hi", "redrawn"],
                vec![
                    text(model.clone()),
                    ser(&metric),
                    num(point),
                    num(ci.lo),
                    num(ci.hi),
                    Value::from(ci.redrawn),
                ],
            )
        }
        StatsCommand::Ztest { r1, n1, r2, n2 } => {
            let t = two_prop_ztest(*r1, *n1, *r2, *n2)?;
            one(
                "ztest",
                &["z", "p_value", "cohens_h"],
                vec![num(t.statistic), num(t.p_value), opt(t.effect)],
            )
        }
        StatsCommand::CohensH { p1, p2 } => one(
            "cohens_h",
            &["p1", "p2", "h"],
            vec![num(*p1), num(*p2), num(cohens_h(*p1, *p2)?)],
        ),
        StatsCommand::SampleSize { p1, p2, alpha, power } => one(
            "sample_size",
            &["p1", "p2", "alpha", "power", "n_per_group"],
            vec![
                num(*p1),
                num(*p2),
                num(*alpha),
                num(*power),
                Value::from(sample_size(*p1, *p2, *alpha, *power)?),
            ],
        ),
        StatsCommand::ErrReduction { baseline, improved } => one(
            "error_reduction",
            &["baseline", "improved", "reduction_percent"],
            vec![
                num(*baseline),
                num(*improved),
                num(100.0 * reduction_of_error(*baseline, *improved)?),
            ],
        ),
    }
}
