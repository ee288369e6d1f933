//! Command-line front end: ingestion, configuration, synthetic data,
//! hyperparameter sampling and report emission.

pub mod commands;
pub mod config;
pub mod hparam;
pub mod io;
pub mod report;
pub mod synth;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::cohort::Rule;
use crate::error::Result;
use crate::geometry::{Modality, Target};
use crate::metrics::FrocLevel;
use crate::stats::ClassMetric;
use config::RunConfig;
use hparam::Version;
use io::Schema;
use report::Format;

/// Parse an enum through its serde names, ignoring case.
fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    for candidate in [s.to_string(), s.to_uppercase(), s.to_lowercase()] {
        if let Ok(v) = serde_json::from_value(serde_json::Value::String(candidate)) {
            return Ok(v);
        }
    }
    Err(format!("unrecognized value `{s}`"))
}

#[derive(Debug, Parser)]
#[command(
    name = "mammoscreen",
    version,
    about = "Screening mammography model evaluation toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// IoU threshold for the command's suppression or matching step.
    #[arg(long, global = true)]
    pub iou: Option<f64>,
    #[arg(long, global = true, value_parser = parse_serde::<FrocLevel>)]
    pub level: Option<FrocLevel>,
    #[arg(long, global = true)]
    pub margin_percentiles: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Output file (text, json) or directory (csv-plotdata); stdout if absent.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregateMode {
    Nms,
    Mss,
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PermMetric {
    Auroc,
    Auprc,
    Froc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Suppress overlapping boxes per image, per DBT stack, or across modalities.
    Aggregate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Score grids; required for mss.
        #[arg(long)]
        grids: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AggregateMode::Nms)]
        mode: AggregateMode,
        #[arg(long, value_parser = parse_serde::<Target>, default_value = "malignant")]
        target: Target,
        /// Write the suppressed prediction records as NDJSON.
        #[arg(long)]
        write_predictions: Option<PathBuf>,
    },
    /// Run the attention head over score grids with feature vectors.
    PredictHead {
        #[arg(long)]
        grids: PathBuf,
        /// JSON head parameters.
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        global_pool: bool,
    },
    /// Breast-level ROC/PR with bootstrap intervals, and FROC when ground truth is given.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        n_bootstrap: Option<usize>,
    },
    /// Significance tests and closed-form statistics.
    Stats {
        #[command(subcommand)]
        command: StatsCommand,
    },
    /// Greedy forward selection of an ensemble with replacement.
    SelectEnsemble {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        no_alternation: bool,
    },
    /// Green/gray triage at the margin-adjusted operating point.
    Triage {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Predictions used to set the threshold; defaults to --predictions.
        #[arg(long)]
        calibration_predictions: Option<PathBuf>,
        #[arg(long)]
        calibration_labels: Option<PathBuf>,
    },
    /// Sensitivity, specificity and recall savings across rejection percentiles.
    RecallSavings {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Percentile grid spacing; defaults to 1.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Apply the test-set exclusion rules to a timeline.
    CohortFilter {
        #[arg(long)]
        timeline: Option<PathBuf>,
        /// Comma-separated rule precedence, e.g. E1,E2,E3,E4,E5,OccultOnly.
        #[arg(long, value_delimiter = ',', value_parser = parse_rule)]
        rule_order: Vec<Rule>,
    },
    /// Pair FFDM, C-View and DBT images by foreground overlap.
    MatchTriplets {
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        exclude_rows: Option<usize>,
    },
    /// Write a synthetic dataset with planted lesions.
    Synth {
        dir: PathBuf,
        #[arg(long)]
        n_exams: Option<usize>,
        #[arg(long)]
        prevalence: Option<f64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_serde::<Modality>)]
        modalities: Vec<Modality>,
        #[arg(long)]
        lesion_min: Option<f64>,
        #[arg(long)]
        lesion_max: Option<f64>,
        #[arg(long)]
        models_per_modality: Option<usize>,
        #[arg(long)]
        n_slices: Option<u32>,
    },
    /// Draw random-search training configurations.
    HparamSample {
        #[arg(long, value_enum)]
        version: Version,
        #[arg(long, value_parser = parse_serde::<Modality>)]
        modality: Modality,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Parse and validate an input file.
    Ingest {
        #[arg(long, value_enum)]
        schema: Schema,
        path: PathBuf,
        /// Re-emit the validated records.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
}

fn parse_rule(s: &str) -> std::result::Result<Rule, String> {
    parse_serde::<Rule>(s).or_else(|_| match s.to_lowercase().replace(['-', '_'], "").as_str() {
        "occultonly" | "occult" => Ok(Rule::OccultOnly),
        _ => Err(format!("unknown rule `{s}`")),
    })
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Paired permutation test of model A over model B.
    Permtest {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        model_a: String,
        #[arg(long)]
        model_b: String,
        #[arg(long, value_enum, default_value_t = PermMetric::Auroc)]
        metric: PermMetric,
        #[arg(long)]
        n_iter: Option<usize>,
    },
    /// Percentile bootstrap interval of one model's metric.
    Bootstrap {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        model: String,
        #[arg(long, value_parser = parse_serde::<ClassMetric>)]
        metric: Option<ClassMetric>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Two-proportion z-test on r1/n1 against r2/n2.
    Ztest {
        #[arg(long)]
        r1: u64,
        #[arg(long)]
        n1: u64,
        #[arg(long)]
        r2: u64,
        #[arg(long)]
        n2: u64,
    },
    CohensH {
        #[arg(long)]
        p1: f64,
        #[arg(long)]
        p2: f64,
    },
    /// Per-group sample size for a two-proportion comparison.
    SampleSize {
        #[arg(long)]
        p1: f64,
        #[arg(long)]
        p2: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.8)]
        power: f64,
    },
    /// Relative reduction of error between two AUC values, in percent.
    ErrReduction {
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        improved: f64,
    },
}

/// Merge the config file and command-line overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(l) = global.level {
        cfg.level = l;
    }
    if let Some(m) = global.margin_percentiles {
        cfg.margin_percentiles = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parse arguments, run the command and emit its report. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run_cli(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run_cli(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    if let Some(iou) = cli.global.iou {
        if !(0.0..=1.0).contains(&iou) {
            return Err(crate::error::Error::Config(format!("--iou {iou} outside [0, 1]")));
        }
    }
    let ctx = commands::Ctx {
        cfg,
        iou: cli.global.iou,
    };
    let report = commands::execute(&cli.command, &ctx)?;
    report.emit(cli.global.format, cli.global.out.as_deref())
}
