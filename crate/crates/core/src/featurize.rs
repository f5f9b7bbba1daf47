//! Bag-of-concepts featurization: vocabulary construction over training
//! rows, sparse raw features (event frequencies, latest measurement values,
//! one-hot demographics, age), and the customized min-max normalizations
//! that map every observed value into (0, 1], with 0 reserved for missing.

use std::collections::{BTreeSet, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CohortTables, Domain};

/// Feature families. The order of the variants fixes the family order of
/// vocabulary columns.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    ConditionId,
    ProcedureId,
    ObservationId,
    DrugId,
    DeviceId,
    VisitId,
    ConditionSet,
    ProcedureSet,
    ObservationSet,
    DrugSet,
    DeviceSet,
    MeasurementId,
    DemoGender,
    DemoRace,
    DemoEthnicity,
    Age,
}

/// Which normalization applies to a family's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormRule {
    /// Count features: (v - min + 1) / (max - min + 1).
    Discrete,
    /// Measurement values: (v - min + c) / (max - min + c), c = (max-min)/10.
    Measurement,
    /// One-hot demographics, already in {1}.
    PassThrough,
    /// Age divided by 19, capped at 1.
    Age,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 16] = [
        FeatureFamily::ConditionId,
        FeatureFamily::ProcedureId,
        FeatureFamily::ObservationId,
        FeatureFamily::DrugId,
        FeatureFamily::DeviceId,
        FeatureFamily::VisitId,
        FeatureFamily::ConditionSet,
        FeatureFamily::ProcedureSet,
        FeatureFamily::ObservationSet,
        FeatureFamily::DrugSet,
        FeatureFamily::DeviceSet,
        FeatureFamily::MeasurementId,
        FeatureFamily::DemoGender,
        FeatureFamily::DemoRace,
        FeatureFamily::DemoEthnicity,
        FeatureFamily::Age,
    ];

    /// Per-concept-id family for an event domain.
    pub fn id_family(domain: Domain) -> Option<FeatureFamily> {
        match domain {
            Domain::Condition => Some(FeatureFamily::ConditionId),
            Domain::Procedure => Some(FeatureFamily::ProcedureId),
            Domain::Observation => Some(FeatureFamily::ObservationId),
            Domain::Drug => Some(FeatureFamily::DrugId),
            Domain::Device => Some(FeatureFamily::DeviceId),
            Domain::Visit => Some(FeatureFamily::VisitId),
            Domain::Payer => None,
        }
    }

    /// Concept-set family for an event domain. Visit has no set family, and
    /// measurement set ids are never used.
    pub fn set_family(domain: Domain) -> Option<FeatureFamily> {
        match domain {
            Domain::Condition => Some(FeatureFamily::ConditionSet),
            Domain::Procedure => Some(FeatureFamily::ProcedureSet),
            Domain::Observation => Some(FeatureFamily::ObservationSet),
            Domain::Drug => Some(FeatureFamily::DrugSet),
            Domain::Device => Some(FeatureFamily::DeviceSet),
            Domain::Visit | Domain::Payer => None,
        }
    }

    /// The id family a set family summarizes, if any.
    pub fn id_family_of_set(&self) -> Option<FeatureFamily> {
        match self {
            FeatureFamily::ConditionSet => Some(FeatureFamily::ConditionId),
            FeatureFamily::ProcedureSet => Some(FeatureFamily::ProcedureId),
            FeatureFamily::ObservationSet => Some(FeatureFamily::ObservationId),
            FeatureFamily::DrugSet => Some(FeatureFamily::DrugId),
            FeatureFamily::DeviceSet => Some(FeatureFamily::DeviceId),
            _ => None,
        }
    }

    pub fn is_set(&self) -> bool {
        self.id_family_of_set().is_some()
    }

    pub fn is_demo(&self) -> bool {
        matches!(
            self,
            FeatureFamily::DemoGender | FeatureFamily::DemoRace | FeatureFamily::DemoEthnicity
        )
    }

    pub fn norm_rule(&self) -> NormRule {
        match self {
            FeatureFamily::MeasurementId => NormRule::Measurement,
            FeatureFamily::Age => NormRule::Age,
            f if f.is_demo() => NormRule::PassThrough,
            _ => NormRule::Discrete,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureFamily::ConditionId => "condition_id",
            FeatureFamily::ProcedureId => "procedure_id",
            FeatureFamily::ObservationId => "observation_id",
            FeatureFamily::DrugId => "drug_id",
            FeatureFamily::DeviceId => "device_id",
            FeatureFamily::VisitId => "visit_id",
            FeatureFamily::ConditionSet => "condition_set",
            FeatureFamily::ProcedureSet => "procedure_set",
            FeatureFamily::ObservationSet => "observation_set",
            FeatureFamily::DrugSet => "drug_set",
            FeatureFamily::DeviceSet => "device_set",
            FeatureFamily::MeasurementId => "measurement_id",
            FeatureFamily::DemoGender => "demo_gender",
            FeatureFamily::DemoRace => "demo_race",
            FeatureFamily::DemoEthnicity => "demo_ethnicity",
            FeatureFamily::Age => "age",
        }
    }
}

impl std::fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One vocabulary column: a family plus a concept (or concept-set) id.
/// The age key carries no concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub family: FeatureFamily,
    pub concept: Option<String>,
}

impl FeatureKey {
    pub fn new(family: FeatureFamily, concept: impl Into<String>) -> Self {
        FeatureKey {
            family,
            concept: Some(concept.into()),
        }
    }

    pub fn age() -> Self {
        FeatureKey {
            family: FeatureFamily::Age,
            concept: None,
        }
    }
}

/// Ordered, frozen mapping from feature keys to column indices.
/// Serializes as the key list; the index is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureKey>", into = "Vec<FeatureKey>")]
pub struct ConceptVocabulary {
    keys: Vec<FeatureKey>,
    index: HashMap<FeatureKey, usize>,
}

impl TryFrom<Vec<FeatureKey>> for ConceptVocabulary {
    type Error = FeaturizeError;

    fn try_from(keys: Vec<FeatureKey>) -> Result<Self, FeaturizeError> {
        ConceptVocabulary::from_keys(keys)
    }
}

impl From<ConceptVocabulary> for Vec<FeatureKey> {
    fn from(vocab: ConceptVocabulary) -> Self {
        vocab.keys
    }
}

impl ConceptVocabulary {
    /// Build from keys in the given order; keys must be unique.
    pub fn from_keys(keys: Vec<FeatureKey>) -> Result<Self, FeaturizeError> {
        let mut index = HashMap::with_capacity(keys.len());
        for (i, key) in keys.iter().enumerate() {
            if index.insert(key.clone(), i).is_some() {
                return Err(FeaturizeError::DuplicateKey(format!("{key:?}")));
            }
        }
        Ok(ConceptVocabulary { keys, index })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[FeatureKey] {
        &self.keys
    }

    pub fn index_of(&self, key: &FeatureKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key_at(&self, column: usize) -> &FeatureKey {
        &self.keys[column]
    }

    pub fn family_of(&self, column: usize) -> FeatureFamily {
        self.keys[column].family
    }

    /// Columns belonging to one family, in vocabulary order.
    pub fn family_columns(&self, family: FeatureFamily) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.keys[i].family == family)
            .collect()
    }

    pub fn families_present(&self) -> BTreeSet<FeatureFamily> {
        self.keys.iter().map(|k| k.family).collect()
    }
}

/// Sparse patient-by-feature matrix. Rows hold (column, value) entries
/// sorted by column; absent entries are semantically 0 ("missing").
///
/// Used both for raw values (counts, raw measurements, raw age) and for
/// normalized values in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_features: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub row_ids: Vec<String>,
}

/// Raw (pre-normalization) features.
pub type RawFeatureMatrix = SparseMatrix;
/// Normalized features; every stored value lies in (0, 1].
pub type FeatureMatrix = SparseMatrix;

impl SparseMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows[row]
            .binary_search_by_key(&col, |&(c, _)| c)
            .map(|i| self.rows[row][i].1)
            .unwrap_or(0.0)
    }

    /// Dense copy of selected rows (all columns).
    pub fn densify_rows(&self, row_indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((row_indices.len(), self.n_features));
        for (i, &r) in row_indices.iter().enumerate() {
            for &(c, v) in &self.rows[r] {
                out[[i, c]] = v;
            }
        }
        out
    }

    pub fn densify(&self) -> Array2<f64> {
        let all: Vec<usize> = (0..self.n_rows()).collect();
        self.densify_rows(&all)
    }

    /// Restrict to a subset of rows, preserving the given order.
    pub fn subset_rows(&self, row_indices: &[usize]) -> SparseMatrix {
        SparseMatrix {
            n_features: self.n_features,
            rows: row_indices.iter().map(|&r| self.rows[r].clone()).collect(),
            row_ids: row_indices
                .iter()
                .map(|&r| self.row_ids[r].clone())
                .collect(),
        }
    }

    /// Re-index columns from `from` onto `to`; columns absent from `to` are
    /// dropped. `to` must be a subset of `from` up to reordering.
    pub fn project(&self, from: &ConceptVocabulary, to: &ConceptVocabulary) -> SparseMatrix {
        let mut map: Vec<Option<usize>> = vec![None; from.len()];
        for (new_col, key) in to.keys().iter().enumerate() {
            if let Some(old_col) = from.index_of(key) {
                map[old_col] = Some(new_col);
            }
        }
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut out: Vec<(usize, f64)> = row
                    .iter()
                    .filter_map(|&(c, v)| map[c].map(|nc| (nc, v)))
                    .collect();
                out.sort_by_key(|&(c, _)| c);
                out
            })
            .collect();
        SparseMatrix {
            n_features: to.len(),
            rows,
            row_ids: self.row_ids.clone(),
        }
    }
}

/// Per-column normalization statistics fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub family: FeatureFamily,
    pub min: f64,
    pub max: f64,
    /// (max - min) / 10; only meaningful for measurement columns.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub columns: Vec<ColumnStats>,
}

impl NormalizationStats {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Restrict stats to the columns of `to` (subset of `from`).
    pub fn project(&self, from: &ConceptVocabulary, to: &ConceptVocabulary) -> NormalizationStats {
        NormalizationStats {
            columns: to
                .keys()
                .iter()
                .map(|key| self.columns[from.index_of(key).expect("key in source vocab")].clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizeConfig {
    /// Enabled feature families. Disabled families get no vocabulary keys.
    pub families: BTreeSet<FeatureFamily>,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            families: FeatureFamily::ALL.into_iter().collect(),
        }
    }
}

impl FeaturizeConfig {
    /// Ethnicity off: it is largely redundant with race in this setting.
    pub fn without_ethnicity() -> Self {
        let mut cfg = Self::default();
        cfg.families.remove(&FeatureFamily::DemoEthnicity);
        cfg
    }

    pub fn enabled(&self, family: FeatureFamily) -> bool {
        self.families.contains(&family)
    }
}

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("training person set is empty")]
    EmptyTrainingSet,
    #[error("duplicate vocabulary key {0}")]
    DuplicateKey(String),
    #[error("stats cover {stats} columns but matrix has {matrix}")]
    MissingStats { stats: usize, matrix: usize },
}

/// Build the vocabulary from concepts observed in training rows only.
/// Ordering is (family, lexicographic concept), so column indices are
/// reproducible across runs.
pub fn build_vocabulary(
    cohort: &CohortTables,
    training_ids: &HashSet<String>,
    config: &FeaturizeConfig,
) -> Result<ConceptVocabulary, FeaturizeError> {
    if training_ids.is_empty() {
        return Err(FeaturizeError::EmptyTrainingSet);
    }
    let mut keys: BTreeSet<FeatureKey> = BTreeSet::new();

    for (&domain, events) in &cohort.events {
        let id_family = FeatureFamily::id_family(domain);
        let set_family = FeatureFamily::set_family(domain);
        for event in events {
            if !training_ids.contains(&event.person_id) {
                continue;
            }
            if let Some(family) = id_family.filter(|f| config.enabled(*f)) {
                keys.insert(FeatureKey::new(family, event.concept_id.clone()));
            }
            if let Some(family) = set_family.filter(|f| config.enabled(*f)) {
                if let Some(set_id) = cohort.concept_sets.get(domain, &event.concept_id) {
                    keys.insert(FeatureKey::new(family, set_id));
                }
            }
        }
    }

    if config.enabled(FeatureFamily::MeasurementId) {
        for m in &cohort.measurements {
            if training_ids.contains(&m.person_id) {
                keys.insert(FeatureKey::new(
                    FeatureFamily::MeasurementId,
                    m.concept_id.clone(),
                ));
            }
        }
    }

    for person in &cohort.persons {
        if !training_ids.contains(&person.person_id) {
            continue;
        }
        let demos = [
            (FeatureFamily::DemoGender, &person.gender_concept_id),
            (FeatureFamily::DemoRace, &person.race_concept_id),
            (FeatureFamily::DemoEthnicity, &person.ethnicity_concept_id),
        ];
        for (family, concept) in demos {
            if config.enabled(family) {
                if let Some(c) = concept {
                    keys.insert(FeatureKey::new(family, c.clone()));
                }
            }
        }
    }

    if config.enabled(FeatureFamily::Age) {
        keys.insert(FeatureKey::age());
    }

    // BTreeSet iteration order is already (family, concept) sorted.
    ConceptVocabulary::from_keys(keys.into_iter().collect())
}

/// Raw feature extraction for the given persons against a frozen vocabulary.
/// Concepts absent from the vocabulary are skipped by contract.
pub fn count_features(
    cohort: &CohortTables,
    vocab: &ConceptVocabulary,
    person_ids: &[String],
) -> RawFeatureMatrix {
    let row_of: HashMap<&str, usize> = person_ids
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let mut rows: Vec<HashMap<usize, f64>> = vec![HashMap::new(); person_ids.len()];

    for (&domain, events) in &cohort.events {
        let id_family = FeatureFamily::id_family(domain);
        let set_family = FeatureFamily::set_family(domain);
        for event in events {
            let Some(&row) = row_of.get(event.person_id.as_str()) else {
                continue;
            };
            if let Some(family) = id_family {
                if let Some(col) =
                    vocab.index_of(&FeatureKey::new(family, event.concept_id.clone()))
                {
                    *rows[row].entry(col).or_insert(0.0) += 1.0;
                }
            }
            // Concept-set entries are sums of member concept-id counts.
            if let Some(family) = set_family {
                if let Some(set_id) = cohort.concept_sets.get(domain, &event.concept_id) {
                    if let Some(col) = vocab.index_of(&FeatureKey::new(family, set_id)) {
                        *rows[row].entry(col).or_insert(0.0) += 1.0;
                    }
                }
            }
        }
    }

    // Latest measurement per (patient, concept): latest event_date wins,
    // ties broken by largest row_ordinal. A missing date sorts earliest.
    let mut latest: HashMap<(usize, usize), (String, usize, f64)> = HashMap::new();
    for m in &cohort.measurements {
        let Some(&row) = row_of.get(m.person_id.as_str()) else {
            continue;
        };
        let Some(col) = vocab.index_of(&FeatureKey::new(
            FeatureFamily::MeasurementId,
            m.concept_id.clone(),
        )) else {
            continue;
        };
        let date_key = m.event_date.clone().unwrap_or_default();
        let candidate = (date_key, m.row_ordinal, m.value);
        latest
            .entry((row, col))
            .and_modify(|best| {
                if (candidate.0.as_str(), candidate.1) > (best.0.as_str(), best.1) {
                    *best = candidate.clone();
                }
            })
            .or_insert(candidate);
    }
    for ((row, col), (_, _, value)) in latest {
        rows[row].insert(col, value);
    }

    for person in &cohort.persons {
        let Some(&row) = row_of.get(person.person_id.as_str()) else {
            continue;
        };
        let demos = [
            (FeatureFamily::DemoGender, &person.gender_concept_id),
            (FeatureFamily::DemoRace, &person.race_concept_id),
            (FeatureFamily::DemoEthnicity, &person.ethnicity_concept_id),
        ];
        for (family, concept) in demos {
            if let Some(c) = concept {
                if let Some(col) = vocab.index_of(&FeatureKey::new(family, c.clone())) {
                    rows[row].insert(col, 1.0);
                }
            }
        }
        if let Some(col) = vocab.index_of(&FeatureKey::age()) {
            // Age 0 is indistinguishable from the missing sentinel after
            // normalization, so it is not stored.
            if person.age_years > 0 {
                rows[row].insert(col, person.age_years as f64);
            }
        }
    }

    let rows = rows
        .into_iter()
        .map(|m| {
            let mut v: Vec<(usize, f64)> = m.into_iter().collect();
            v.sort_by_key(|&(c, _)| c);
            v
        })
        .collect();

    RawFeatureMatrix {
        n_features: vocab.len(),
        rows,
        row_ids: person_ids.to_vec(),
    }
}

/// Fit per-column min/max (and c for measurements) over the observed
/// entries of training rows. Columns never observed in training get the
/// min = max = 1 sentinel.
pub fn fit_normalization(
    training: &RawFeatureMatrix,
    vocab: &ConceptVocabulary,
) -> NormalizationStats {
    let mut min = vec![f64::INFINITY; vocab.len()];
    let mut max = vec![f64::NEG_INFINITY; vocab.len()];
    for row in &training.rows {
        for &(c, v) in row {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    let columns = (0..vocab.len())
        .map(|c| {
            let family = vocab.family_of(c);
            let (lo, hi) = if min[c].is_finite() {
                (min[c], max[c])
            } else {
                (1.0, 1.0)
            };
            ColumnStats {
                family,
                min: lo,
                max: hi,
                c: (hi - lo) / 10.0,
            }
        })
        .collect();
    NormalizationStats { columns }
}

/// (v - min + 1) / (max - min + 1), with v clamped to [min, max] first.
pub fn normalize_discrete(v: f64, min: f64, max: f64) -> f64 {
    let v = v.clamp(min, max);
    (v - min + 1.0) / (max - min + 1.0)
}

/// (v - min + c) / (max - min + c) with c = (max - min) / 10, v clamped to
/// [min, max]. A degenerate column (max = min, hence c = 0) maps any
/// observed value to 1.0 so it stays distinguishable from missing.
pub fn normalize_measurement(v: f64, min: f64, max: f64, c: f64) -> f64 {
    if max == min {
        return 1.0;
    }
    let v = v.clamp(min, max);
    (v - min + c) / (max - min + c)
}

/// age / 19, capped at 1.0.
pub fn normalize_age(age_years: f64) -> f64 {
    (age_years / 19.0).min(1.0)
}

/// Transform each stored entry per its family rule. The sparsity pattern is
/// preserved exactly; demographics pass through unchanged.
pub fn apply_normalization(
    raw: &RawFeatureMatrix,
    stats: &NormalizationStats,
) -> Result<FeatureMatrix, FeaturizeError> {
    if stats.len() != raw.n_features {
        return Err(FeaturizeError::MissingStats {
            stats: stats.len(),
            matrix: raw.n_features,
        });
    }
    let rows = raw
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|&(c, v)| {
                    let s = &stats.columns[c];
                    let nv = match s.family.norm_rule() {
                        NormRule::Discrete => normalize_discrete(v, s.min, s.max),
                        NormRule::Measurement => normalize_measurement(v, s.min, s.max, s.c),
                        NormRule::PassThrough => v,
                        NormRule::Age => normalize_age(v),
                    };
                    (c, nv)
                })
                .collect()
        })
        .collect();
    Ok(FeatureMatrix {
        n_features: raw.n_features,
        rows,
        row_ids: raw.row_ids.clone(),
    })
}
