//! Training protocols: per-trial splits, negative undersampling, the epoch
//! loop with auPRC early stopping, inner-repeat selection, and ensemble
//! assembly. Seeds for every random choice are derived from the master seed
//! by (trial, repeat) so any degree of parallelism yields identical output.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ProtocolConfig, TaskProfile};
use crate::featurize::{ConceptVocabulary, FeatureMatrix, NormalizationStats};
use crate::metrics::{auprc, evaluate, f2, MetricError, ScoredLabels};
use crate::models::{
    mlp_infer, mlp_infer_sparse, mlp_init, mlp_train_step, AdamState, MlpParams, ModelError,
};
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trial {trial} split lacks a class in one half")]
    DegenerateSplit { trial: usize },
    #[error("training labels contain no positives")]
    NoPositives,
    #[error("features have {got} columns but the ensemble expects {expected}")]
    VocabularyMismatch { expected: usize, got: usize },
    #[error("row count {rows} does not match label count {labels}")]
    LabelMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Early stopping on a maximized validation metric: stop after `patience`
/// consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct PatienceTracker {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl PatienceTracker {
    pub fn new(patience: usize) -> Self {
        PatienceTracker {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record one epoch's metric; returns true when it strictly improves
    /// on the best so far.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn exhausted(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// All positive indices plus floor(fraction * #negatives) negatives drawn
/// without replacement; the result is shuffled deterministically.
pub fn undersample_negatives(
    indices: &[usize],
    labels: &[u8],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, TrainError> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for &i in indices {
        if labels[i] == 1 {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    if positives.is_empty() {
        return Err(TrainError::NoPositives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negatives.shuffle(&mut rng);
    let keep = (fraction * negatives.len() as f64).floor() as usize;
    negatives.truncate(keep);
    let mut out = positives;
    out.extend(negatives);
    out.shuffle(&mut rng);
    Ok(out)
}

/// One completed single-model training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub repeat: usize,
    pub params: MlpParams,
    pub val_auprc: f64,
    pub val_auroc: f64,
    pub val_f2: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seed: u64,
}

impl TrialResult {
    /// Task-2 ranking score.
    pub fn sum_score(&self) -> f64 {
        self.val_auprc + self.val_auroc + self.val_f2
    }
}

/// Train one MLP with shuffled mini-batches and auPRC early stopping;
/// returns the snapshot from the best validation epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_single(
    x_train: &Array2<f64>,
    y_train: &[u8],
    x_val: &Array2<f64>,
    y_val: &[u8],
    config: &ProtocolConfig,
    trial: usize,
    repeat: usize,
    seed: u64,
) -> Result<TrialResult, TrainError> {
    if x_train.nrows() != y_train.len() {
        return Err(TrainError::LabelMismatch {
            rows: x_train.nrows(),
            labels: y_train.len(),
        });
    }
    let single = |y: &[u8]| {
        let pos = y.iter().filter(|&&v| v == 1).count();
        pos == 0 || pos == y.len()
    };
    if single(y_train) || single(y_val) {
        return Err(TrainError::DegenerateSplit { trial });
    }

    let mut params = mlp_init(x_train.ncols(), derive_seed(seed, &["init"]), config.mlp);
    let mut adam = AdamState::new(config.learning_rate);
    let mut tracker = PatienceTracker::new(config.patience);
    let mut best_params = params.clone();
    let mut epochs_run = 0;

    let n = x_train.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &["epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);

        let mut starts: Vec<usize> = (0..n).step_by(config.batch_size).collect();
        // A trailing 1-row batch cannot be batch-normalized; merge it into
        // the previous batch.
        if n % config.batch_size == 1 && starts.len() > 1 {
            starts.pop();
        }
        for (b, &start) in starts.iter().enumerate() {
            let end = if b + 1 < starts.len() {
                starts[b + 1]
            } else {
                n
            };
            let idx = &order[start..end];
            let xb = x_train.select(Axis(0), idx);
            let yb: Vec<u8> = idx.iter().map(|&i| y_train[i]).collect();
            let mask_seed =
                derive_seed(seed, &["mask", &epoch.to_string(), &b.to_string()]);
            mlp_train_step(&mut params, &mut adam, &xb, &yb, mask_seed)?;
        }

        let scores = mlp_infer(&params, x_val).to_vec();
        let data = ScoredLabels::new(scores, y_val.to_vec())?;
        let val = auprc(&data)?;
        if tracker.observe(epoch, val) {
            best_params = params.clone();
        }
        if tracker.exhausted() {
            break;
        }
    }

    let scores = mlp_infer(&best_params, x_val).to_vec();
    let data = ScoredLabels::new(scores, y_val.to_vec())?;
    let report = evaluate(&data, config.threshold);
    Ok(TrialResult {
        trial,
        repeat,
        params: best_params,
        val_auprc: report.auprc.expect("validation has positives"),
        val_auroc: report.auroc.expect("validation has both classes"),
        val_f2: report.f2,
        best_epoch: tracker.best_epoch(),
        epochs_run,
        seed,
    })
}

/// The trained predictor: member parameters plus everything needed to
/// featurize new cohorts identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<MlpParams>,
    pub vocabulary: ConceptVocabulary,
    pub stats: NormalizationStats,
    pub threshold: f64,
    pub protocol: ProtocolConfig,
}

/// Summary of one trial winner kept in the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub winning_repeat: usize,
    pub val_auprc: f64,
    pub val_auroc: f64,
    pub val_f2: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub in_ensemble: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub ensemble: EnsembleModel,
    pub trials: Vec<TrialSummary>,
    /// Single-model trainings performed (trials x repeats).
    pub total_trainings: usize,
}

/// Shuffle-split row indices into (train, validation) per the validation
/// fraction; at least one row per side.
fn trial_split(
    n: usize,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let val_n = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let (val, train) = order.split_at(val_n);
    let mut val = val.to_vec();
    let mut train = train.to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn densify_labels(labels: &[u8], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| labels[i]).collect()
}

fn run_protocol(
    features: &FeatureMatrix,
    labels: &[u8],
    vocabulary: &ConceptVocabulary,
    stats: &NormalizationStats,
    config: &ProtocolConfig,
    master_seed: u64,
) -> Result<ProtocolRun, TrainError> {
    if features.n_rows() != labels.len() {
        return Err(TrainError::LabelMismatch {
            rows: features.n_rows(),
            labels: labels.len(),
        });
    }
    if !labels.contains(&1) {
        return Err(TrainError::NoPositives);
    }

    // Per-trial splits and undersampled training sets, precomputed so the
    // parallel tasks share them per trial.
    struct TrialData {
        x_train: Array2<f64>,
        y_train: Vec<u8>,
        x_val: Array2<f64>,
        y_val: Vec<u8>,
    }
    let mut trial_data = Vec::with_capacity(config.outer_trials);
    for trial in 0..config.outer_trials {
        let split_seed = derive_seed(master_seed, &["trial", &trial.to_string(), "split"]);
        let (mut train_idx, val_idx) =
            trial_split(features.n_rows(), config.validation_fraction, split_seed);
        if let Some(fraction) = config.negative_sample_fraction {
            let sample_seed =
                derive_seed(master_seed, &["trial", &trial.to_string(), "undersample"]);
            train_idx = undersample_negatives(&train_idx, labels, fraction, sample_seed)?;
        }
        trial_data.push(TrialData {
            x_train: features.densify_rows(&train_idx),
            y_train: densify_labels(labels, &train_idx),
            x_val: features.densify_rows(&val_idx),
            y_val: densify_labels(labels, &val_idx),
        });
    }

    let tasks: Vec<(usize, usize)> = (0..config.outer_trials)
        .flat_map(|t| (0..config.inner_repeats).map(move |r| (t, r)))
        .collect();
    let results: Vec<TrialResult> = tasks
        .par_iter()
        .map(|&(trial, repeat)| {
            let data = &trial_data[trial];
            let seed = derive_seed(
                master_seed,
                &["trial", &trial.to_string(), "repeat", &repeat.to_string()],
            );
            train_single(
                &data.x_train,
                &data.y_train,
                &data.x_val,
                &data.y_val,
                config,
                trial,
                repeat,
                seed,
            )
        })
        .collect::<Result<_, _>>()?;
    let total_trainings = results.len();

    // Per-trial winner: highest validation auPRC, ties to the lower repeat.
    let mut winners: Vec<TrialResult> = Vec::with_capacity(config.outer_trials);
    for trial in 0..config.outer_trials {
        let winner = results
            .iter()
            .filter(|r| r.trial == trial)
            .max_by(|a, b| {
                a.val_auprc
                    .partial_cmp(&b.val_auprc)
                    .unwrap()
                    .then(b.repeat.cmp(&a.repeat))
            })
            .expect("every trial has repeats");
        winners.push(winner.clone());
    }

    // Ensemble membership: Task 1 keeps every trial winner; Task 2 ranks by
    // the metric sum and keeps the top `ensemble_size`, ties to the lower
    // trial index.
    let selected: Vec<usize> = match config.task {
        TaskProfile::Task1 => (0..winners.len()).collect(),
        TaskProfile::Task2 => {
            let mut ranked: Vec<usize> = (0..winners.len()).collect();
            ranked.sort_by(|&a, &b| {
                winners[b]
                    .sum_score()
                    .partial_cmp(&winners[a].sum_score())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut top: Vec<usize> = ranked.into_iter().take(config.ensemble_size).collect();
            top.sort_unstable();
            top
        }
    };

    let threshold = if config.calibrate_threshold {
        let mut scores = Vec::new();
        let mut pooled_labels = Vec::new();
        for &i in &selected {
            let data = &trial_data[winners[i].trial];
            scores.extend(mlp_infer(&winners[i].params, &data.x_val).to_vec());
            pooled_labels.extend_from_slice(&data.y_val);
        }
        calibrate_f2_threshold(&scores, &pooled_labels)
    } else {
        config.threshold
    };

    let trials = winners
        .iter()
        .enumerate()
        .map(|(i, w)| TrialSummary {
            trial: w.trial,
            winning_repeat: w.repeat,
            val_auprc: w.val_auprc,
            val_auroc: w.val_auroc,
            val_f2: w.val_f2,
            best_epoch: w.best_epoch,
            epochs_run: w.epochs_run,
            in_ensemble: selected.contains(&i),
        })
        .collect();
    let members = selected.iter().map(|&i| winners[i].params.clone()).collect();
    Ok(ProtocolRun {
        ensemble: EnsembleModel {
            members,
            vocabulary: vocabulary.clone(),
            stats: stats.clone(),
            threshold,
            protocol: config.clone(),
        },
        trials,
        total_trainings,
    })
}

pub fn run_task1_protocol(
    features: &FeatureMatrix,
    labels: &[u8],
    vocabulary: &ConceptVocabulary,
    stats: &NormalizationStats,
    config: &ProtocolConfig,
    master_seed: u64,
) -> Result<ProtocolRun, TrainError> {
    debug_assert_eq!(config.task, TaskProfile::Task1);
    run_protocol(features, labels, vocabulary, stats, config, master_seed)
}

pub fn run_task2_protocol(
    features: &FeatureMatrix,
    labels: &[u8],
    vocabulary: &ConceptVocabulary,
    stats: &NormalizationStats,
    config: &ProtocolConfig,
    master_seed: u64,
) -> Result<ProtocolRun, TrainError> {
    debug_assert_eq!(config.task, TaskProfile::Task2);
    run_protocol(features, labels, vocabulary, stats, config, master_seed)
}

pub fn run_protocol_for(
    features: &FeatureMatrix,
    labels: &[u8],
    vocabulary: &ConceptVocabulary,
    stats: &NormalizationStats,
    config: &ProtocolConfig,
    master_seed: u64,
) -> Result<ProtocolRun, TrainError> {
    run_protocol(features, labels, vocabulary, stats, config, master_seed)
}

/// The threshold maximizing F2 over the pooled scores; among maximizers the
/// highest threshold wins.
pub fn calibrate_f2_threshold(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in &candidates {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &y) in scores.iter().zip(labels) {
            if s >= t {
                if y == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if positives == 0 {
            0.0
        } else {
            tp as f64 / positives as f64
        };
        let score = f2(precision, recall);
        if score > best.0 {
            best = (score, t);
        }
    }
    best.1
}

/// Mean member probability per row, plus binary calls at the stored
/// threshold. Input must be featurized with the ensemble's vocabulary.
pub fn predict(
    ensemble: &EnsembleModel,
    features: &FeatureMatrix,
) -> Result<(Vec<f64>, Vec<u8>), TrainError> {
    if features.n_features != ensemble.vocabulary.len() {
        return Err(TrainError::VocabularyMismatch {
            expected: ensemble.vocabulary.len(),
            got: features.n_features,
        });
    }
    if ensemble.members.is_empty() {
        return Err(ModelError::EmptyEnsemble.into());
    }
    for member in &ensemble.members {
        if member.input_dim() != features.n_features {
            return Err(TrainError::VocabularyMismatch {
                expected: member.input_dim(),
                got: features.n_features,
            });
        }
    }
    let mut scores = vec![0.0; features.n_rows()];
    for member in &ensemble.members {
        let member_scores = mlp_infer_sparse(member, &features.rows);
        for (acc, s) in scores.iter_mut().zip(member_scores.iter()) {
            *acc += s;
        }
    }
    for s in &mut scores {
        *s /= ensemble.members.len() as f64;
    }
    let calls = scores
        .iter()
        .map(|&s| u8::from(s >= ensemble.threshold))
        .collect();
    Ok((scores, calls))
}
