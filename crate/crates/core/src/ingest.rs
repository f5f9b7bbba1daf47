//! OMOP-lite CSV table ingestion: person, six event domains (plus payer),
//! measurements, the concept-set map, and labels. Parsing is streaming and
//! row-by-row; malformed rows are collected into the parse outcome instead
//! of being silently dropped, so `records + skipped + errored` always equals
//! the number of data rows.
//!
//! File schemas are documented in `docs/formats.md`. CSV dialect is RFC-4180
//! with a required header row, UTF-8.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Event table domains. The six discrete domains feed featurization; payer
/// is parseable but excluded from features by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Condition,
    Procedure,
    Observation,
    Drug,
    Device,
    Visit,
    Payer,
}

impl Domain {
    /// The six discrete event domains used for featurization.
    pub const DISCRETE: [Domain; 6] = [
        Domain::Condition,
        Domain::Procedure,
        Domain::Observation,
        Domain::Drug,
        Domain::Device,
        Domain::Visit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Condition => "condition",
            Domain::Procedure => "procedure",
            Domain::Observation => "observation",
            Domain::Drug => "drug",
            Domain::Device => "device",
            Domain::Visit => "visit",
            Domain::Payer => "payer",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, IngestError> {
        match s {
            "condition" => Ok(Domain::Condition),
            "procedure" => Ok(Domain::Procedure),
            "observation" => Ok(Domain::Observation),
            "drug" => Ok(Domain::Drug),
            "device" => Ok(Domain::Device),
            "visit" => Ok(Domain::Visit),
            "payer" => Ok(Domain::Payer),
            other => Err(IngestError::UnknownDomain(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub person_id: String,
    pub age_years: u32,
    pub gender_concept_id: Option<String>,
    pub race_concept_id: Option<String>,
    pub ethnicity_concept_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub person_id: String,
    pub concept_id: String,
    /// ISO-8601 date; compared lexicographically (valid for YYYY-MM-DD).
    pub event_date: Option<String>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub person_id: String,
    pub concept_id: String,
    pub value: f64,
    pub event_date: Option<String>,
    /// 0-based data-row index, used to break same-date ties (latest wins).
    pub row_ordinal: usize,
}

/// Map from (domain, concept_id) to a higher-level concept-set id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptSetMap {
    entries: HashMap<(Domain, String), String>,
}

impl ConceptSetMap {
    pub fn insert(&mut self, domain: Domain, concept_id: String, set_id: String) {
        self.entries.insert((domain, concept_id), set_id);
    }

    pub fn get(&self, domain: Domain, concept_id: &str) -> Option<&str> {
        self.entries
            .get(&(domain, concept_id.to_string()))
            .map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Domain, String), &String)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelMap {
    entries: HashMap<String, u8>,
}

impl LabelMap {
    pub fn insert(&mut self, person_id: String, label: u8) {
        self.entries.insert(person_id, label);
    }

    pub fn get(&self, person_id: &str) -> Option<u8> {
        self.entries.get(person_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.values().filter(|&&l| l == 1).count()
    }

    pub fn prevalence(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.entries.len() as f64
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &u8)> {
        self.entries.iter()
    }
}

/// All tables of one cohort. Immutable after loading; safe to share
/// read-only across threads.
#[derive(Debug, Clone)]
pub struct CohortTables {
    pub persons: Vec<PersonRecord>,
    pub events: BTreeMap<Domain, Vec<EventRecord>>,
    pub measurements: Vec<MeasurementRecord>,
    pub concept_sets: ConceptSetMap,
    pub labels: LabelMap,
}

impl CohortTables {
    pub fn person_ids(&self) -> Vec<String> {
        self.persons.iter().map(|p| p.person_id.clone()).collect()
    }
}

/// Names the file backing each table, relative to the cohort directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub person: String,
    #[serde(default)]
    pub tables: BTreeMap<String, String>,
    pub measurement: Option<String>,
    pub concept_set_map: Option<String>,
    pub labels: String,
}

impl CohortManifest {
    /// The conventional manifest for the standard file names.
    pub fn standard() -> Self {
        let mut tables = BTreeMap::new();
        for d in Domain::DISCRETE {
            tables.insert(d.as_str().to_string(), format!("{d}.csv"));
        }
        CohortManifest {
            person: "person.csv".to_string(),
            tables,
            measurement: Some("measurement.csv".to_string()),
            concept_set_map: Some("concept_set_map.csv".to_string()),
            labels: "labels.csv".to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(|e| IngestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_reader(file).map_err(|e| IngestError::BadManifest(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    /// Pediatric cohort guard: persons older than this are row errors.
    pub max_age_years: u32,
    /// Fail `load_cohort` if any table had row-level errors.
    pub strict: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            max_age_years: 21,
            strict: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{file}: missing required column '{column}'")]
    MissingColumn { file: String, column: String },
    #[error("manifest names missing table file {0}")]
    MissingTable(PathBuf),
    #[error("invalid manifest: {0}")]
    BadManifest(String),
    #[error("unknown domain '{0}'")]
    UnknownDomain(String),
    #[error("{file}: {count} malformed rows, first: row {row}: {kind}")]
    RowErrors {
        file: String,
        count: usize,
        row: usize,
        kind: RowErrorKind,
    },
    #[error("{domain} event at row {row} references unknown person '{person_id}'")]
    OrphanEvent {
        domain: Domain,
        row: usize,
        person_id: String,
    },
    #[error("label references unknown person '{0}'")]
    OrphanLabel(String),
}

/// A problem confined to one data row.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowErrorKind {
    #[error("duplicate person_id '{0}'")]
    DuplicatePersonId(String),
    #[error("age {age} exceeds pediatric guard {max}")]
    AgeOutOfRange { age: u32, max: u32 },
    #[error("empty concept_id")]
    EmptyConceptId,
    #[error("non-numeric value '{0}'")]
    NonNumericValue(String),
    #[error("unparseable field '{field}': '{value}'")]
    BadField { field: String, value: String },
    #[error("label '{0}' is not 0 or 1")]
    BadLabel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    /// 0-based data-row index (header excluded).
    pub row: usize,
    pub kind: RowErrorKind,
}

/// Result of parsing one table: records, skipped rows (counted, expected,
/// e.g. empty measurement values), and row-level errors.
#[derive(Debug, Clone)]
pub struct ParseOutcome<T> {
    pub records: Vec<T>,
    pub skipped: usize,
    pub errors: Vec<RowError>,
}

impl<T> ParseOutcome<T> {
    fn new() -> Self {
        ParseOutcome {
            records: Vec::new(),
            skipped: 0,
            errors: Vec::new(),
        }
    }

    /// Total data rows seen (conservation check).
    pub fn total_rows(&self) -> usize {
        self.records.len() + self.skipped + self.errors.len()
    }
}

struct TableReader {
    reader: csv::Reader<File>,
    file: String,
    columns: HashMap<String, usize>,
}

impl TableReader {
    fn open(path: &Path, required: &[&str]) -> Result<Self, IngestError> {
        let file_name = path.display().to_string();
        let file = File::open(path).map_err(|e| IngestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
        let headers = reader.headers().map_err(|e| IngestError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(IngestError::MissingColumn {
                    file: file_name,
                    column: col.to_string(),
                });
            }
        }
        Ok(TableReader {
            reader,
            file: file_name,
            columns,
        })
    }

    fn col(&self, name: &str) -> usize {
        self.columns[name]
    }

    fn rows(&mut self) -> impl Iterator<Item = Result<csv::StringRecord, csv::Error>> + '_ {
        self.reader.records()
    }
}

fn opt_field(record: &csv::StringRecord, idx: usize) -> Option<String> {
    record
        .get(idx)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

/// Parse person.csv. Duplicate ids and ages above the guard become row
/// errors.
pub fn parse_person(
    path: &Path,
    options: &IngestOptions,
) -> Result<ParseOutcome<PersonRecord>, IngestError> {
    let mut table = TableReader::open(
        path,
        &[
            "person_id",
            "age",
            "gender_concept_id",
            "race_concept_id",
            "ethnicity_concept_id",
        ],
    )?;
    let (c_id, c_age) = (table.col("person_id"), table.col("age"));
    let (c_gender, c_race, c_eth) = (
        table.col("gender_concept_id"),
        table.col("race_concept_id"),
        table.col("ethnicity_concept_id"),
    );
    let file = table.file.clone();
    let mut out = ParseOutcome::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (row, record) in table.rows().enumerate() {
        let record = record.map_err(|e| IngestError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let person_id = record.get(c_id).unwrap_or("").trim().to_string();
        if person_id.is_empty() {
            out.errors.push(RowError {
                row,
                kind: RowErrorKind::BadField {
                    field: "person_id".into(),
                    value: String::new(),
                },
            });
            continue;
        }
        if !seen.insert(person_id.clone()) {
            out.errors.push(RowError {
                row,
                kind: RowErrorKind::DuplicatePersonId(person_id),
            });
            continue;
        }
        let age_raw = record.get(c_age).unwrap_or("").trim();
        let age_years = match age_raw.parse::<u32>() {
            Ok(a) => a,
            Err(_) => {
                out.errors.push(RowError {
                    row,
                    kind: RowErrorKind::BadField {
                        field: "age".into(),
                        value: age_raw.to_string(),
                    },
                });
                continue;
            }
        };
        if age_years > options.max_age_years {
            out.errors.push(RowError {
                row,
                kind: RowErrorKind::AgeOutOfRange {
                    age: age_years,
                    max: options.max_age_years,
                },
            });
            continue;
        }
        out.records.push(PersonRecord {
            person_id,
            age_years,
            gender_concept_id: opt_field(&record, c_gender),
            race_concept_id: opt_field(&record, c_race),
            ethnicity_concept_id: opt_field(&record, c_eth),
        });
    }
    log::debug!(
        "{file}: {} persons, {} row errors",
        out.records.len(),
        out.errors.len()
    );
    Ok(out)
}

/// Parse one event-domain table; records carry the requested domain tag and
/// preserve file order.
pub fn parse_domain_table(
    path: &Path,
    domain: Domain,
) -> Result<ParseOutcome<EventRecord>, IngestError> {
    let mut table = TableReader::open(path, &["person_id", "concept_id", "event_date"])?;
    let (c_pid, c_cid, c_date) = (
        table.col("person_id"),
        table.col("concept_id"),
        table.col("event_date"),
    );
    let mut out = ParseOutcome::new();
    for (row, record) in table.rows().enumerate() {
        let record = record.map_err(|e| IngestError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let concept_id = record.get(c_cid).unwrap_or("").trim().to_string();
        if concept_id.is_empty() {
            out.errors.push(RowError {
                row,
                kind: RowErrorKind::EmptyConceptId,
            });
            continue;
        }
        out.records.push(EventRecord {
            person_id: record.get(c_pid).unwrap_or("").trim().to_string(),
            concept_id,
            event_date: opt_field(&record, c_date),
            domain,
        });
    }
    Ok(out)
}

/// Parse measurement.csv. Rows with an empty value are skipped and counted;
/// non-empty non-numeric values are row errors. `row_ordinal` is the 0-based
/// data-row index.
pub fn parse_measurements(path: &Path) -> Result<ParseOutcome<MeasurementRecord>, IngestError> {
    let mut table = TableReader::open(path, &["person_id", "concept_id", "value", "event_date"])?;
    let (c_pid, c_cid, c_val, c_date) = (
        table.col("person_id"),
        table.col("concept_id"),
        table.col("value"),
        table.col("event_date"),
    );
    let mut out = ParseOutcome::new();
    for (row, record) in table.rows().enumerate() {
        let record = record.map_err(|e| IngestError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let raw = record.get(c_val).unwrap_or("").trim();
        if raw.is_empty() {
            out.skipped += 1;
            continue;
        }
        let value = match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                out.errors.push(RowError {
                    row,
                    kind: RowErrorKind::NonNumericValue(raw.to_string()),
                });
                continue;
            }
        };
        let concept_id = record.get(c_cid).unwrap_or("").trim().to_string();
        if concept_id.is_empty() {
            out.errors.push(RowError {
                row,
                kind: RowErrorKind::EmptyConceptId,
            });
            continue;
        }
        out.records.push(MeasurementRecord {
            person_id: record.get(c_pid).unwrap_or("").trim().to_string(),
            concept_id,
            value,
            event_date: opt_field(&record, c_date),
            row_ordinal: row,
        });
    }
    Ok(out)
}

/// Parse concept_set_map.csv (domain,concept_id,concept_set_id).
pub fn parse_concept_set_map(path: &Path) -> Result<ConceptSetMap, IngestError> {
    let mut table = TableReader::open(path, &["domain", "concept_id", "concept_set_id"])?;
    let (c_dom, c_cid, c_sid) = (
        table.col("domain"),
        table.col("concept_id"),
        table.col("concept_set_id"),
    );
    let mut map = ConceptSetMap::default();
    for record in table.rows() {
        let record = record.map_err(|e| IngestError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let domain: Domain = record.get(c_dom).unwrap_or("").trim().parse()?;
        map.insert(
            domain,
            record.get(c_cid).unwrap_or("").trim().to_string(),
            record.get(c_sid).unwrap_or("").trim().to_string(),
        );
    }
    Ok(map)
}

/// Parse labels.csv (person_id,label).
pub fn parse_labels(path: &Path) -> Result<ParseOutcome<(String, u8)>, IngestError> {
    let mut table = TableReader::open(path, &["person_id", "label"])?;
    let (c_pid, c_lab) = (table.col("person_id"), table.col("label"));
    let mut out = ParseOutcome::new();
    for (row, record) in table.rows().enumerate() {
        let record = record.map_err(|e| IngestError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let raw = record.get(c_lab).unwrap_or("").trim();
        let label = match raw {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                out.errors.push(RowError {
                    row,
                    kind: RowErrorKind::BadLabel(other.to_string()),
                });
                continue;
            }
        };
        out.records
            .push((record.get(c_pid).unwrap_or("").trim().to_string(), label));
    }
    Ok(out)
}

fn fail_on_row_errors<T>(file: &str, outcome: &ParseOutcome<T>) -> Result<(), IngestError> {
    if let Some(first) = outcome.errors.first() {
        return Err(IngestError::RowErrors {
            file: file.to_string(),
            count: outcome.errors.len(),
            row: first.row,
            kind: first.kind.clone(),
        });
    }
    Ok(())
}

/// Load a full cohort directory per the manifest, applying cross-table
/// referential checks and logging a summary.
pub fn load_cohort(
    dir: &Path,
    manifest: &CohortManifest,
    options: &IngestOptions,
) -> Result<CohortTables, IngestError> {
    let resolve = |name: &str| -> Result<PathBuf, IngestError> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(IngestError::MissingTable(path));
        }
        Ok(path)
    };

    let persons_out = parse_person(&resolve(&manifest.person)?, options)?;
    if options.strict {
        fail_on_row_errors(&manifest.person, &persons_out)?;
    }
    let persons = persons_out.records;
    let known: HashSet<&str> = persons.iter().map(|p| p.person_id.as_str()).collect();

    let mut events: BTreeMap<Domain, Vec<EventRecord>> = BTreeMap::new();
    for (domain_name, file) in &manifest.tables {
        let domain: Domain = domain_name.parse()?;
        let out = parse_domain_table(&resolve(file)?, domain)?;
        if options.strict {
            fail_on_row_errors(file, &out)?;
        }
        for (row, ev) in out.records.iter().enumerate() {
            if !known.contains(ev.person_id.as_str()) {
                return Err(IngestError::OrphanEvent {
                    domain,
                    row,
                    person_id: ev.person_id.clone(),
                });
            }
        }
        events.insert(domain, out.records);
    }

    let measurements = match &manifest.measurement {
        Some(file) => {
            let out = parse_measurements(&resolve(file)?)?;
            if options.strict {
                fail_on_row_errors(file, &out)?;
            }
            for m in &out.records {
                if !known.contains(m.person_id.as_str()) {
                    return Err(IngestError::OrphanEvent {
                        domain: Domain::Observation,
                        row: m.row_ordinal,
                        person_id: m.person_id.clone(),
                    });
                }
            }
            log::debug!("measurements: {} skipped empty values", out.skipped);
            out.records
        }
        None => Vec::new(),
    };

    let concept_sets = match &manifest.concept_set_map {
        Some(file) => parse_concept_set_map(&resolve(file)?)?,
        None => ConceptSetMap::default(),
    };

    let labels_out = parse_labels(&resolve(&manifest.labels)?)?;
    if options.strict {
        fail_on_row_errors(&manifest.labels, &labels_out)?;
    }
    let mut labels = LabelMap::default();
    for (pid, label) in labels_out.records {
        if !known.contains(pid.as_str()) {
            return Err(IngestError::OrphanLabel(pid));
        }
        labels.insert(pid, label);
    }

    log::info!(
        "cohort loaded: {} persons, {} event tables, {} measurements, {} labels (prevalence {:.4})",
        persons.len(),
        events.len(),
        measurements.len(),
        labels.len(),
        labels.prevalence()
    );

    Ok(CohortTables {
        persons,
        events,
        measurements,
        concept_sets,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn person_two_valid_rows() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "person.csv",
            "person_id,age,gender_concept_id,race_concept_id,ethnicity_concept_id\n\
             p1,5,8507,8527,38003564\n\
             p2,12,8532,,\n",
        );
        let out = parse_person(&p, &IngestOptions::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.errors.len(), 0);
        assert_eq!(out.records[1].race_concept_id, None);
    }

    #[test]
    fn person_header_only_is_empty() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "person.csv",
            "person_id,age,gender_concept_id,race_concept_id,ethnicity_concept_id\n",
        );
        let out = parse_person(&p, &IngestOptions::default()).unwrap();
        assert!(out.records.is_empty());
        assert!(out.errors.is_empty());
    }

    #[test]
    fn person_age_guard() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "person.csv",
            "person_id,age,gender_concept_id,race_concept_id,ethnicity_concept_id\n\
             p1,25,8507,,\n",
        );
        let out = parse_person(&p, &IngestOptions::default()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].row, 0);
        assert_eq!(
            out.errors[0].kind,
            RowErrorKind::AgeOutOfRange { age: 25, max: 21 }
        );
        // The guard is configurable.
        let relaxed = IngestOptions {
            max_age_years: 30,
            ..Default::default()
        };
        assert_eq!(parse_person(&p, &relaxed).unwrap().records.len(), 1);
    }

    #[test]
    fn person_duplicate_id() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "person.csv",
            "person_id,age,gender_concept_id,race_concept_id,ethnicity_concept_id\n\
             p1,5,,,\np1,6,,,\n",
        );
        let out = parse_person(&p, &IngestOptions::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(
            out.errors[0].kind,
            RowErrorKind::DuplicatePersonId("p1".into())
        );
    }

    #[test]
    fn person_missing_column() {
        let dir = TempDir::new().unwrap();
        let p = write_file(dir.path(), "person.csv", "person_id,age\np1,5\n");
        match parse_person(&p, &IngestOptions::default()) {
            Err(IngestError::MissingColumn { column, .. }) => {
                assert_eq!(column, "gender_concept_id")
            }
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn domain_table_tags_and_order() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "condition.csv",
            "person_id,concept_id,event_date\np1,A,2021-01-01\np1,B,\np2,A,2021-02-03\n",
        );
        let out = parse_domain_table(&p, Domain::Condition).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|e| e.domain == Domain::Condition));
        assert_eq!(out.records[1].event_date, None);
        // Determinism: same file, same records.
        let again = parse_domain_table(&p, Domain::Condition).unwrap();
        assert_eq!(out.records, again.records);
    }

    #[test]
    fn domain_table_blank_concept() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "drug.csv",
            "person_id,concept_id,event_date\np1,,2021-01-01\n",
        );
        let out = parse_domain_table(&p, Domain::Drug).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.errors[0].kind, RowErrorKind::EmptyConceptId);
    }

    #[test]
    fn measurements_skip_and_error() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "measurement.csv",
            "person_id,concept_id,value,event_date\n\
             p1,M1,1.0,2021-01-01\np1,M1,,2021-01-02\np2,M2,2.5,\n",
        );
        let out = parse_measurements(&p).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.skipped, 1);
        assert_eq!(out.total_rows(), 3);
        // row_ordinal is the 0-based data-row index, including skipped rows.
        assert_eq!(out.records[1].row_ordinal, 2);
    }

    #[test]
    fn measurements_non_numeric() {
        let dir = TempDir::new().unwrap();
        let p = write_file(
            dir.path(),
            "measurement.csv",
            "person_id,concept_id,value,event_date\np1,M1,abc,\n",
        );
        let out = parse_measurements(&p).unwrap();
        assert_eq!(
            out.errors[0].kind,
            RowErrorKind::NonNumericValue("abc".into())
        );
    }

    fn tiny_cohort(dir: &Path) {
        write_file(
            dir,
            "person.csv",
            "person_id,age,gender_concept_id,race_concept_id,ethnicity_concept_id\n\
             p1,5,8507,8527,\np2,9,8532,8516,\np3,1,8507,8527,\n",
        );
        for d in Domain::DISCRETE {
            write_file(
                dir,
                &format!("{d}.csv"),
                "person_id,concept_id,event_date\np1,X1,2021-01-01\n",
            );
        }
        write_file(
            dir,
            "measurement.csv",
            "person_id,concept_id,value,event_date\np2,M1,3.5,2021-05-01\n",
        );
        write_file(
            dir,
            "concept_set_map.csv",
            "domain,concept_id,concept_set_id\ncondition,X1,S1\n",
        );
        write_file(dir, "labels.csv", "person_id,label\np1,1\np2,0\np3,0\n");
    }

    #[test]
    fn load_cohort_round_trip() {
        let dir = TempDir::new().unwrap();
        tiny_cohort(dir.path());
        let cohort = load_cohort(
            dir.path(),
            &CohortManifest::standard(),
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(cohort.persons.len(), 3);
        assert_eq!(cohort.events.len(), 6);
        assert_eq!(cohort.measurements.len(), 1);
        assert_eq!(cohort.labels.len(), 3);
        assert!((cohort.labels.prevalence() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cohort.concept_sets.get(Domain::Condition, "X1"), Some("S1"));
    }

    #[test]
    fn load_cohort_orphan_event() {
        let dir = TempDir::new().unwrap();
        tiny_cohort(dir.path());
        write_file(
            dir.path(),
            "condition.csv",
            "person_id,concept_id,event_date\nghost,X1,2021-01-01\n",
        );
        match load_cohort(
            dir.path(),
            &CohortManifest::standard(),
            &IngestOptions::default(),
        ) {
            Err(IngestError::OrphanEvent { person_id, .. }) => assert_eq!(person_id, "ghost"),
            other => panic!("expected OrphanEvent, got {other:?}"),
        }
    }

    #[test]
    fn load_cohort_missing_table() {
        let dir = TempDir::new().unwrap();
        tiny_cohort(dir.path());
        std::fs::remove_file(dir.path().join("labels.csv")).unwrap();
        match load_cohort(
            dir.path(),
            &CohortManifest::standard(),
            &IngestOptions::default(),
        ) {
            Err(IngestError::MissingTable(_)) => {}
            other => panic!("expected MissingTable, got {other:?}"),
        }
    }

    #[test]
    fn prevalence_arithmetic() {
        let mut labels = LabelMap::default();
        for i in 0..95 {
            labels.insert(format!("n{i}"), 0);
        }
        for i in 0..5 {
            labels.insert(format!("p{i}"), 1);
        }
        assert!((labels.prevalence() - 0.05).abs() < 1e-12);
    }
}
