//! Feature selection: label-occurrence policies over raw counts, then
//! logistic-regression screening of whole feature families, then a
//! redundancy test that drops concept-set families adding nothing over
//! their concept-id families.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{
    ConceptVocabulary, FeatureFamily, FeatureMatrix, FeaturizeError, NormRule, RawFeatureMatrix,
};
use crate::metrics::{auprc, MetricError, ScoredLabels};
use crate::models::{lr_predict, lr_train, LrConfig, ModelError};
use crate::seeds::derive_seed;

/// How negative-only columns are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Drop every column whose occurrences all fall in label-0 rows.
    DropNegativeOnly,
    /// Keep a negative-only column only if its total occurrence count
    /// reaches the threshold.
    KeepNegativeOnlyIfCountGe(u32),
    KeepAll,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectConfig {
    pub policy_mode: PolicyMode,
    /// Per-family policy overrides; families not listed use `policy_mode`.
    pub policy_overrides: BTreeMap<FeatureFamily, PolicyMode>,
    /// A family survives screening iff its validation auPRC exceeds the
    /// validation prevalence times this factor.
    pub margin_factor: f64,
    /// A set family survives the redundancy test iff combining it with its
    /// id family lifts auPRC by more than this.
    pub redundancy_delta: f64,
    /// Validation share of the deterministic screening split.
    pub screen_validation_fraction: f64,
    pub lr: LrConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            policy_mode: PolicyMode::DropNegativeOnly,
            policy_overrides: BTreeMap::new(),
            margin_factor: 1.1,
            redundancy_delta: 0.005,
            screen_validation_fraction: 0.10,
            lr: LrConfig::default(),
        }
    }
}

impl SelectConfig {
    pub fn mode_for(&self, family: FeatureFamily) -> PolicyMode {
        self.policy_overrides
            .get(&family)
            .copied()
            .unwrap_or(self.policy_mode)
    }

    pub fn validate(&self) -> Result<(), String> {
        let modes =
            std::iter::once(self.policy_mode).chain(self.policy_overrides.values().copied());
        for mode in modes {
            if let PolicyMode::KeepNegativeOnlyIfCountGe(t) = mode {
                if t < 1 {
                    return Err("occurrence threshold must be at least 1".into());
                }
            }
        }
        if !(self.margin_factor >= 0.0 && self.margin_factor.is_finite()) {
            return Err(format!(
                "margin_factor {} must be finite and non-negative",
                self.margin_factor
            ));
        }
        if !self.redundancy_delta.is_finite() {
            return Err(format!("redundancy_delta {} must be finite", self.redundancy_delta));
        }
        if !(self.screen_validation_fraction > 0.0 && self.screen_validation_fraction < 1.0) {
            return Err(format!(
                "screen_validation_fraction {} is outside (0, 1)",
                self.screen_validation_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyScreenResult {
    pub family: FeatureFamily,
    pub auprc: f64,
    /// Positive prevalence of the screening validation split.
    pub baseline: f64,
    pub kept: bool,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedundancyResult {
    pub set_family: FeatureFamily,
    pub id_family: FeatureFamily,
    pub id_auprc: f64,
    pub combined_auprc: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSelectionReport {
    pub initial_features: usize,
    pub after_policy: usize,
    pub families: Vec<FamilyScreenResult>,
    pub redundancy: Vec<RedundancyResult>,
    /// Kept column count per family; values sum to `selected_features`.
    pub family_counts: BTreeMap<FeatureFamily, usize>,
    pub selected_features: usize,
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("screening split for {family} lacks a class in one half")]
    DegenerateSplit { family: FeatureFamily },
    #[error("labels cover {labels} rows but matrix has {rows}")]
    LabelMismatch { labels: usize, rows: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
}

/// Occurrence count of a column: summed raw counts for count-valued
/// families, number of occurrences otherwise (measurement values and
/// one-hot indicators are not counts).
fn occurrence_weight(rule: NormRule, v: f64) -> f64 {
    match rule {
        NormRule::Discrete => v,
        _ => 1.0,
    }
}

/// Per-column keep mask under the occurrence policy. Columns touching any
/// positive row are always kept.
pub fn apply_occurrence_policy(
    raw: &RawFeatureMatrix,
    vocab: &ConceptVocabulary,
    labels: &[u8],
    config: &SelectConfig,
) -> Result<Vec<bool>, SelectError> {
    if labels.len() != raw.n_rows() {
        return Err(SelectError::LabelMismatch {
            labels: labels.len(),
            rows: raw.n_rows(),
        });
    }
    let mut touches_positive = vec![false; vocab.len()];
    let mut count = vec![0.0f64; vocab.len()];
    for (row, &label) in raw.rows.iter().zip(labels) {
        for &(c, v) in row {
            if label == 1 {
                touches_positive[c] = true;
            }
            count[c] += occurrence_weight(vocab.family_of(c).norm_rule(), v);
        }
    }
    Ok((0..vocab.len())
        .map(|c| {
            if touches_positive[c] {
                return true;
            }
            match config.mode_for(vocab.family_of(c)) {
                PolicyMode::KeepAll => true,
                PolicyMode::DropNegativeOnly => false,
                PolicyMode::KeepNegativeOnlyIfCountGe(t) => count[c] >= t as f64,
            }
        })
        .collect())
}

/// Deterministic stratified split of row indices into (train, validation).
fn screening_split(
    labels: &[u8],
    fraction: f64,
    seed: u64,
    family: FeatureFamily,
) -> Result<(Vec<usize>, Vec<usize>), SelectError> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if y == 1 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let take = |v: &[usize]| ((v.len() as f64 * fraction).floor() as usize).max(1);
    if pos.len() < 2 || neg.len() < 2 {
        return Err(SelectError::DegenerateSplit { family });
    }
    let (pv, pt) = pos.split_at(take(&pos));
    let (nv, nt) = neg.split_at(take(&neg));
    let mut val: Vec<usize> = pv.iter().chain(nv).copied().collect();
    let mut train: Vec<usize> = pt.iter().chain(nt).copied().collect();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Restrict rows to the given columns and remap column indices densely.
fn restrict_columns(
    features: &FeatureMatrix,
    rows: &[usize],
    columns: &[usize],
) -> Vec<Vec<(usize, f64)>> {
    let remap: BTreeMap<usize, usize> =
        columns.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    rows.iter()
        .map(|&r| {
            features.rows[r]
                .iter()
                .filter_map(|&(c, v)| remap.get(&c).map(|&i| (i, v)))
                .collect()
        })
        .collect()
}

/// Validation auPRC of a logistic regression over the given columns, plus
/// the validation prevalence.
fn screen_auprc(
    features: &FeatureMatrix,
    labels: &[u8],
    columns: &[usize],
    seed: u64,
    family: FeatureFamily,
    config: &SelectConfig,
) -> Result<(f64, f64), SelectError> {
    let (train_idx, val_idx) =
        screening_split(labels, config.screen_validation_fraction, seed, family)?;
    let train_rows = restrict_columns(features, &train_idx, columns);
    let val_rows = restrict_columns(features, &val_idx, columns);
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();

    let model = lr_train(&train_rows, columns.len(), &train_labels, &config.lr)
        .map_err(|e| match e {
            ModelError::SingleClassInput => SelectError::DegenerateSplit { family },
            other => SelectError::Model(other),
        })?;
    let scores = lr_predict(&model, &val_rows)?;
    let prevalence =
        val_labels.iter().filter(|&&y| y == 1).count() as f64 / val_labels.len() as f64;
    let data = ScoredLabels::new(scores, val_labels).map_err(|e| match e {
        MetricError::SingleClass | MetricError::NoPositives => {
            SelectError::DegenerateSplit { family }
        }
        other => SelectError::Metric(other),
    })?;
    Ok((auprc(&data)?, prevalence))
}

/// Screen one family: kept iff validation auPRC beats prevalence times the
/// margin factor.
pub fn screen_family(
    features: &FeatureMatrix,
    labels: &[u8],
    columns: &[usize],
    family: FeatureFamily,
    seed: u64,
    config: &SelectConfig,
) -> Result<FamilyScreenResult, SelectError> {
    let (score, prevalence) = screen_auprc(features, labels, columns, seed, family, config)?;
    let cutoff = prevalence * config.margin_factor;
    let kept = score > cutoff;
    Ok(FamilyScreenResult {
        family,
        auprc: score,
        baseline: prevalence,
        kept,
        reason: format!("validation auPRC {score:.4} vs cutoff {cutoff:.4}"),
    })
}

/// Redundancy test for a set family against its id family: kept iff the
/// combined columns beat the id columns alone by more than delta, both on
/// the same validation split.
#[allow(clippy::too_many_arguments)]
pub fn screen_redundant_set_family(
    features: &FeatureMatrix,
    labels: &[u8],
    id_columns: &[usize],
    set_columns: &[usize],
    set_family: FeatureFamily,
    id_family: FeatureFamily,
    seed: u64,
    config: &SelectConfig,
) -> Result<RedundancyResult, SelectError> {
    let (id_auprc, _) = screen_auprc(features, labels, id_columns, seed, set_family, config)?;
    let mut combined: Vec<usize> = id_columns.iter().chain(set_columns).copied().collect();
    combined.sort_unstable();
    let (combined_auprc, _) =
        screen_auprc(features, labels, &combined, seed, set_family, config)?;
    Ok(RedundancyResult {
        set_family,
        id_family,
        id_auprc,
        combined_auprc,
        kept: combined_auprc > id_auprc + config.redundancy_delta,
    })
}

/// Full selection: occurrence policy, family screening, set-family
/// redundancy. Deterministic given (matrix, labels, seed, config) for any
/// worker count: family seeds are derived from the master seed by name.
pub fn select_features(
    raw: &RawFeatureMatrix,
    features: &FeatureMatrix,
    vocab: &ConceptVocabulary,
    labels: &[u8],
    config: &SelectConfig,
    master_seed: u64,
) -> Result<(FeatureSelectionReport, ConceptVocabulary), SelectError> {
    let policy_kept = apply_occurrence_policy(raw, vocab, labels, config)?;
    let after_policy = policy_kept.iter().filter(|&&k| k).count();

    // Columns surviving the policy, grouped by family in vocabulary order.
    let mut family_columns: BTreeMap<FeatureFamily, Vec<usize>> = BTreeMap::new();
    for (c, &kept) in policy_kept.iter().enumerate() {
        if kept {
            family_columns.entry(vocab.family_of(c)).or_default().push(c);
        }
    }

    let screen_inputs: Vec<(FeatureFamily, &Vec<usize>)> =
        family_columns.iter().map(|(&f, cols)| (f, cols)).collect();
    let screened: Vec<FamilyScreenResult> = screen_inputs
        .par_iter()
        .map(|&(family, columns)| {
            let seed = derive_seed(master_seed, &["select", "screen", family.as_str()]);
            screen_family(features, labels, columns, family, seed, config)
        })
        .collect::<Result<_, _>>()?;
    let kept_families: BTreeSet<FeatureFamily> = screened
        .iter()
        .filter(|r| r.kept)
        .map(|r| r.family)
        .collect();

    // Redundancy applies to surviving set families whose id family also
    // survived; a set family with no id counterpart has nothing to be
    // redundant with.
    let redundancy_inputs: Vec<(FeatureFamily, FeatureFamily)> = kept_families
        .iter()
        .filter_map(|&set| {
            set.id_family_of_set()
                .filter(|id| kept_families.contains(id))
                .map(|id| (set, id))
        })
        .collect();
    let redundancy: Vec<RedundancyResult> = redundancy_inputs
        .par_iter()
        .map(|&(set, id)| {
            let seed = derive_seed(master_seed, &["select", "redundancy", set.as_str()]);
            screen_redundant_set_family(
                features,
                labels,
                &family_columns[&id],
                &family_columns[&set],
                set,
                id,
                seed,
                config,
            )
        })
        .collect::<Result<_, _>>()?;
    let redundant: BTreeSet<FeatureFamily> = redundancy
        .iter()
        .filter(|r| !r.kept)
        .map(|r| r.set_family)
        .collect();

    let mut keys = Vec::new();
    let mut family_counts: BTreeMap<FeatureFamily, usize> = BTreeMap::new();
    for (&family, columns) in &family_columns {
        if !kept_families.contains(&family) || redundant.contains(&family) {
            continue;
        }
        *family_counts.entry(family).or_insert(0) += columns.len();
        keys.extend(columns.iter().map(|&c| vocab.key_at(c).clone()));
    }
    let selected = ConceptVocabulary::from_keys(keys)?;
    let report = FeatureSelectionReport {
        initial_features: vocab.len(),
        after_policy,
        families: screened,
        redundancy,
        family_counts,
        selected_features: selected.len(),
    };
    Ok((report, selected))
}
