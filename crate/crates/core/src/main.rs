//! Pipeline CLI: synth, featurize, select, train, predict, evaluate.
//! Stages communicate only via files; any run is reproducible from its
//! config plus master seed, for any --workers count.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pedrisk::artifacts::{self, ArtifactError, FeaturizeArtifacts};
use pedrisk::config::{ConfigError, PipelineConfig, TaskProfile};
use pedrisk::featurize::{
    apply_normalization, build_vocabulary, count_features, fit_normalization, ConceptVocabulary,
    FeaturizeError,
};
use pedrisk::ingest::{load_cohort, parse_labels, CohortManifest, IngestError, IngestOptions};
use pedrisk::metrics::{evaluate, MetricError, ScoredLabels};
use pedrisk::models::ModelError;
use pedrisk::select::{select_features, SelectError};
use pedrisk::synth::{generate_cohort, SynthConfig, SynthError};
use pedrisk::train::{predict, run_protocol_for, TrainError};

#[derive(Parser)]
#[command(
    name = "pedrisk",
    about = "Pediatric risk prediction over OMOP-lite cohorts",
    version
)]
struct Cli {
    /// Worker threads for trial-parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory.
    Synth(SynthArgs),
    /// Extract and normalize features from a cohort.
    Featurize(FeaturizeArgs),
    /// Reduce the feature set by occurrence policy and LR screening.
    Select(SelectArgs),
    /// Train the task ensemble on featurized data.
    Train(TrainArgs),
    /// Score a cohort with a trained ensemble.
    Predict(PredictArgs),
    /// Compare predictions against labels.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// SynthConfig JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output cohort directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Cohort directory containing manifest.json.
    #[arg(long)]
    cohort: PathBuf,
    /// PipelineConfig JSON; omit to use the task profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task profile when no config file is given.
    #[arg(long, default_value = "task1")]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SelectArgs {
    /// Featurize output directory.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "task1")]
    task: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Featurize output directory.
    #[arg(long)]
    features: PathBuf,
    /// Select output directory; omit to train on all features.
    #[arg(long)]
    selection: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "task1")]
    task: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output ensemble directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained ensemble directory.
    #[arg(long)]
    model: PathBuf,
    /// Raw cohort directory to featurize and score.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Pre-featurized directory to score instead of a raw cohort.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output predictions CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions CSV from the predict stage.
    #[arg(long)]
    predictions: PathBuf,
    /// Labels CSV (person_id,label).
    #[arg(long)]
    labels: PathBuf,
    /// Decision threshold for the confusion counts.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output EvalReport JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional ROC curve CSV (fpr,tpr).
    #[arg(long)]
    roc_out: Option<PathBuf>,
    /// Optional PR curve CSV (recall,precision).
    #[arg(long)]
    pr_out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Errors bucketed by exit code: 2 config, 3 data, 4 internal.
#[derive(Debug)]
enum AppError {
    Config(String),
    Data(String),
    Internal(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Data(m) | AppError::Internal(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<SynthError> for AppError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig { .. } => AppError::Config(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<IngestError> for AppError {
    fn from(e: IngestError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<ArtifactError> for AppError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Exists(_) => AppError::Config(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<FeaturizeError> for AppError {
    fn from(e: FeaturizeError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<SelectError> for AppError {
    fn from(e: SelectError) -> Self {
        match e {
            SelectError::DegenerateSplit { .. } | SelectError::LabelMismatch { .. } => {
                AppError::Data(e.to_string())
            }
            _ => AppError::Internal(e.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DegenerateSplit { .. }
            | TrainError::NoPositives
            | TrainError::VocabularyMismatch { .. }
            | TrainError::LabelMismatch { .. } => AppError::Data(e.to_string()),
            TrainError::Model(ModelError::NonFiniteLoss(_)) => AppError::Internal(e.to_string()),
            TrainError::Model(_) | TrainError::Metric(_) => AppError::Internal(e.to_string()),
        }
    }
}

impl From<MetricError> for AppError {
    fn from(e: MetricError) -> Self {
        AppError::Data(e.to_string())
    }
}

#[derive(Serialize)]
struct RunLog<'a> {
    stage: &'a str,
    seed: Option<u64>,
    workers: Option<usize>,
    wall_seconds: f64,
    effective_config: serde_json::Value,
}

fn write_run_log(
    dir: &Path,
    stage: &str,
    seed: Option<u64>,
    workers: Option<usize>,
    started: Instant,
    effective_config: serde_json::Value,
) -> Result<(), AppError> {
    let log = RunLog {
        stage,
        seed,
        workers,
        wall_seconds: started.elapsed().as_secs_f64(),
        effective_config,
    };
    artifacts::write_json(&dir.join(artifacts::RUN_LOG_FILE), &log)?;
    Ok(())
}

fn load_pipeline_config(
    config: &Option<PathBuf>,
    task: &str,
    seed: Option<u64>,
) -> Result<PipelineConfig, AppError> {
    let mut cfg = match config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::for_task(task.parse::<TaskProfile>()?),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    log::info!(
        "effective config: {}",
        serde_json::to_string(&cfg).expect("config serializes")
    );
    Ok(cfg)
}

fn cmd_synth(args: &SynthArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let mut config: SynthConfig = match &args.config {
        Some(path) => artifacts::read_json(path).map_err(|e| AppError::Config(e.to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    log::info!(
        "effective config: {}",
        serde_json::to_string(&config).expect("config serializes")
    );
    artifacts::guard_overwrite(&args.out, args.force)?;
    let truth = generate_cohort(&config, &args.out)?;
    log::info!(
        "generated {} patients, realized prevalence {:.4}",
        config.n_patients,
        truth.realized_prevalence
    );
    write_run_log(
        &args.out,
        "synth",
        Some(config.seed),
        None,
        started,
        serde_json::to_value(&config).expect("config serializes"),
    )
}

fn cmd_featurize(args: &FeaturizeArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let config = load_pipeline_config(&args.config, &args.task, None)?;
    artifacts::guard_overwrite(&args.out, args.force)?;

    let manifest = CohortManifest::load(&args.cohort.join("manifest.json"))?;
    let cohort = load_cohort(&args.cohort, &manifest, &IngestOptions::default())?;
    let person_ids = cohort.person_ids();
    let training: HashSet<String> = person_ids.iter().cloned().collect();
    let vocabulary = build_vocabulary(&cohort, &training, &config.featurize)?;
    let raw = count_features(&cohort, &vocabulary, &person_ids);
    let stats = fit_normalization(&raw, &vocabulary);
    let features = apply_normalization(&raw, &stats)?;
    let labels: Vec<u8> = person_ids
        .iter()
        .map(|id| cohort.labels.get(id).expect("labels validated on load"))
        .collect();
    log::info!(
        "featurized {} patients into {} columns",
        person_ids.len(),
        vocabulary.len()
    );
    artifacts::write_featurize(
        &args.out,
        &FeaturizeArtifacts {
            vocabulary,
            stats,
            raw,
            features,
            labels,
        },
    )?;
    write_run_log(
        &args.out,
        "featurize",
        None,
        None,
        started,
        serde_json::to_value(&config).expect("config serializes"),
    )
}

fn cmd_select(args: &SelectArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let config = load_pipeline_config(&args.config, &args.task, args.seed)?;
    artifacts::guard_overwrite(&args.out, args.force)?;

    let data = artifacts::read_featurize(&args.features)?;
    let (report, selected) = select_features(
        &data.raw,
        &data.features,
        &data.vocabulary,
        &data.labels,
        &config.select,
        config.seed,
    )?;
    log::info!(
        "selected {} of {} features",
        report.selected_features,
        report.initial_features
    );
    std::fs::create_dir_all(&args.out)
        .map_err(|e| AppError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    artifacts::write_selection(&args.out, &report, &selected)?;
    write_run_log(
        &args.out,
        "select",
        Some(config.seed),
        None,
        started,
        serde_json::to_value(&config).expect("config serializes"),
    )
}

fn cmd_train(args: &TrainArgs, workers: Option<usize>) -> Result<(), AppError> {
    let started = Instant::now();
    let config = load_pipeline_config(&args.config, &args.task, args.seed)?;
    artifacts::guard_overwrite(&args.out, args.force)?;

    let data = artifacts::read_featurize(&args.features)?;
    let (vocabulary, features, stats) = match &args.selection {
        Some(dir) => {
            let selected: ConceptVocabulary =
                artifacts::read_json(&dir.join(artifacts::SELECTED_VOCAB_FILE))?;
            let features = data.features.project(&data.vocabulary, &selected);
            let stats = data.stats.project(&data.vocabulary, &selected);
            (selected, features, stats)
        }
        None => (data.vocabulary, data.features, data.stats),
    };

    let run = run_protocol_for(
        &features,
        &data.labels,
        &vocabulary,
        &stats,
        &config.protocol,
        config.seed,
    )?;
    println!("trial  repeat  val_auPRC  val_auROC  val_F2  ensemble");
    for t in &run.trials {
        println!(
            "{:>5}  {:>6}  {:>9.4}  {:>9.4}  {:>6.4}  {}",
            t.trial,
            t.winning_repeat,
            t.val_auprc,
            t.val_auroc,
            t.val_f2,
            if t.in_ensemble { "yes" } else { "no" }
        );
    }
    log::info!(
        "{} trainings, {}-member ensemble",
        run.total_trainings,
        run.ensemble.members.len()
    );
    artifacts::write_ensemble(&args.out, &run.ensemble)?;
    artifacts::write_json(&args.out.join("trials.json"), &run.trials)?;
    write_run_log(
        &args.out,
        "train",
        Some(config.seed),
        workers,
        started,
        serde_json::to_value(&config).expect("config serializes"),
    )
}

fn cmd_predict(args: &PredictArgs) -> Result<(), AppError> {
    let ensemble = artifacts::read_ensemble(&args.model)?;
    let features = match (&args.cohort, &args.features) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(AppError::Config(
                "predict needs exactly one of --cohort or --features".into(),
            ));
        }
        (Some(cohort_dir), None) => {
            let manifest = CohortManifest::load(&cohort_dir.join("manifest.json"))?;
            let cohort = load_cohort(cohort_dir, &manifest, &IngestOptions::default())?;
            let person_ids = cohort.person_ids();
            let raw = count_features(&cohort, &ensemble.vocabulary, &person_ids);
            apply_normalization(&raw, &ensemble.stats)?
        }
        (None, Some(features_dir)) => {
            let data = artifacts::read_featurize(features_dir)?;
            let raw = data.raw.project(&data.vocabulary, &ensemble.vocabulary);
            apply_normalization(&raw, &ensemble.stats)?
        }
    };
    artifacts::guard_overwrite(&args.out, args.force)?;
    let (scores, calls) = predict(&ensemble, &features)?;
    artifacts::write_predictions(&args.out, &features.row_ids, &scores, &calls)?;
    log::info!("scored {} patients", scores.len());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), AppError> {
    let predictions = artifacts::read_predictions(&args.predictions)?;
    let outcome = parse_labels(&args.labels)?;
    if !outcome.errors.is_empty() {
        return Err(AppError::Data(format!(
            "{} bad rows in {}",
            outcome.errors.len(),
            args.labels.display()
        )));
    }
    let labels: std::collections::HashMap<String, u8> = outcome.records.into_iter().collect();
    let mut scores = Vec::with_capacity(predictions.len());
    let mut aligned = Vec::with_capacity(predictions.len());
    for (id, score, _) in &predictions {
        let label = labels
            .get(id)
            .ok_or_else(|| AppError::Data(format!("no label for {id}")))?;
        scores.push(*score);
        aligned.push(*label);
    }
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(AppError::Config(format!(
            "threshold {} is outside [0, 1]",
            args.threshold
        )));
    }
    let data = ScoredLabels::new(scores, aligned)?;
    let report = evaluate(&data, args.threshold);
    artifacts::guard_overwrite(&args.out, args.force)?;
    artifacts::write_json(&args.out, &report)?;
    let write_curve = |path: &PathBuf, header: &str, points: &[(f64, f64)]| -> Result<(), AppError> {
        artifacts::guard_overwrite(path, args.force)?;
        let mut text = String::from(header);
        text.push('\n');
        for (x, y) in points {
            text.push_str(&format!("{x},{y}\n"));
        }
        std::fs::write(path, text)
            .map_err(|e| AppError::Data(format!("cannot write {}: {e}", path.display())))
    };
    if let Some(path) = &args.roc_out {
        write_curve(path, "fpr,tpr", &report.roc_points)?;
    }
    if let Some(path) = &args.pr_out {
        write_curve(path, "recall,precision", &report.pr_points)?;
    }
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    };
    println!("auROC  auPRC  F2");
    println!(
        "{}   {}   {:.2}",
        fmt(report.auroc),
        fmt(report.auprc),
        report.f2
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), AppError> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(AppError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| AppError::Internal(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Featurize(args) => cmd_featurize(args),
        Command::Select(args) => cmd_select(args),
        Command::Train(args) => cmd_train(args, cli.workers),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("RISK_LOG_LEVEL", "info"),
    )
    .init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}
