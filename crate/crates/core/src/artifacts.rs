//! On-disk artifact formats connecting the pipeline stages. Every format is
//! deterministic: identical inputs produce byte-identical files, which the
//! determinism tests rely on. Numbers are written with Rust's shortest
//! round-trip float formatting, so values survive a write/read cycle
//! exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ProtocolConfig;
use crate::featurize::{ConceptVocabulary, NormalizationStats, SparseMatrix};
use crate::models::MlpParams;
use crate::select::FeatureSelectionReport;
use crate::train::EnsembleModel;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad format in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("output {0} already exists (use --force to overwrite)")]
    Exists(PathBuf),
}

fn io_err(path: &Path, source: std::io::Error) -> ArtifactError {
    ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> ArtifactError {
    ArtifactError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| ArtifactError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| ArtifactError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn sha256_hex(path: &Path) -> Result<String, ArtifactError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Sparse matrix as two CSVs: `rows.csv` (row,person_id,label) and a
/// triplet file (row,col,value). Triplets appear in row-major order.
pub fn write_matrix(
    triplet_path: &Path,
    rows_path: &Path,
    matrix: &SparseMatrix,
    labels: &[u8],
) -> Result<(), ArtifactError> {
    let mut rows_file =
        BufWriter::new(File::create(rows_path).map_err(|e| io_err(rows_path, e))?);
    writeln!(rows_file, "row,person_id,label").map_err(|e| io_err(rows_path, e))?;
    for (i, id) in matrix.row_ids.iter().enumerate() {
        writeln!(rows_file, "{i},{id},{}", labels[i]).map_err(|e| io_err(rows_path, e))?;
    }
    rows_file.flush().map_err(|e| io_err(rows_path, e))?;

    let mut file =
        BufWriter::new(File::create(triplet_path).map_err(|e| io_err(triplet_path, e))?);
    writeln!(file, "row,col,value").map_err(|e| io_err(triplet_path, e))?;
    for (i, row) in matrix.rows.iter().enumerate() {
        for &(c, v) in row {
            writeln!(file, "{i},{c},{v}").map_err(|e| io_err(triplet_path, e))?;
        }
    }
    file.flush().map_err(|e| io_err(triplet_path, e))
}

pub fn read_matrix(
    triplet_path: &Path,
    rows_path: &Path,
    n_features: usize,
) -> Result<(SparseMatrix, Vec<u8>), ArtifactError> {
    let rows_file = File::open(rows_path).map_err(|e| io_err(rows_path, e))?;
    let mut row_ids = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(rows_file).lines().enumerate() {
        let line = line.map_err(|e| io_err(rows_path, e))?;
        if lineno == 0 {
            if line != "row,person_id,label" {
                return Err(format_err(rows_path, format!("bad header {line:?}")));
            }
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (row, id, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(r), Some(i), Some(l)) => (r, i, l),
            _ => return Err(format_err(rows_path, format!("bad row at line {lineno}"))),
        };
        let row: usize = row
            .parse()
            .map_err(|_| format_err(rows_path, format!("bad row index at line {lineno}")))?;
        if row != row_ids.len() {
            return Err(format_err(
                rows_path,
                format!("row indices must be dense and ordered (line {lineno})"),
            ));
        }
        let label: u8 = label
            .parse()
            .map_err(|_| format_err(rows_path, format!("bad label at line {lineno}")))?;
        row_ids.push(id.to_string());
        labels.push(label);
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); row_ids.len()];
    let file = File::open(triplet_path).map_err(|e| io_err(triplet_path, e))?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(triplet_path, e))?;
        if lineno == 0 {
            if line != "row,col,value" {
                return Err(format_err(triplet_path, format!("bad header {line:?}")));
            }
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let bad = || format_err(triplet_path, format!("bad triplet at line {lineno}"));
        let row: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let col: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let value: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if row >= rows.len() || col >= n_features {
            return Err(format_err(
                triplet_path,
                format!("triplet out of bounds at line {lineno}"),
            ));
        }
        rows[row].push((col, value));
    }
    for row in &mut rows {
        row.sort_by_key(|&(c, _)| c);
    }
    Ok((
        SparseMatrix {
            n_features,
            rows,
            row_ids,
        },
        labels,
    ))
}

/// Contents of a featurize stage output directory.
pub struct FeaturizeArtifacts {
    pub vocabulary: ConceptVocabulary,
    pub stats: NormalizationStats,
    pub raw: SparseMatrix,
    pub features: SparseMatrix,
    pub labels: Vec<u8>,
}

pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.json";
pub const RAW_FILE: &str = "raw.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const ROWS_FILE: &str = "rows.csv";
pub const SELECTION_REPORT_FILE: &str = "selection_report.json";
pub const SELECTED_VOCAB_FILE: &str = "selected_vocab.json";
pub const ENSEMBLE_MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const RUN_LOG_FILE: &str = "run_log.json";

pub fn write_featurize(dir: &Path, artifacts: &FeaturizeArtifacts) -> Result<(), ArtifactError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join(VOCAB_FILE), &artifacts.vocabulary)?;
    write_json(&dir.join(STATS_FILE), &artifacts.stats)?;
    write_matrix(
        &dir.join(RAW_FILE),
        &dir.join(ROWS_FILE),
        &artifacts.raw,
        &artifacts.labels,
    )?;
    // features.csv shares rows.csv; writing it twice is harmless and keeps
    // both matrices self-contained.
    write_matrix(
        &dir.join(FEATURES_FILE),
        &dir.join(ROWS_FILE),
        &artifacts.features,
        &artifacts.labels,
    )
}

pub fn read_featurize(dir: &Path) -> Result<FeaturizeArtifacts, ArtifactError> {
    let vocabulary: ConceptVocabulary = read_json(&dir.join(VOCAB_FILE))?;
    let stats: NormalizationStats = read_json(&dir.join(STATS_FILE))?;
    let (raw, labels) = read_matrix(&dir.join(RAW_FILE), &dir.join(ROWS_FILE), vocabulary.len())?;
    let (features, _) = read_matrix(
        &dir.join(FEATURES_FILE),
        &dir.join(ROWS_FILE),
        vocabulary.len(),
    )?;
    Ok(FeaturizeArtifacts {
        vocabulary,
        stats,
        raw,
        features,
        labels,
    })
}

pub fn write_selection(
    dir: &Path,
    report: &FeatureSelectionReport,
    selected: &ConceptVocabulary,
) -> Result<(), ArtifactError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join(SELECTION_REPORT_FILE), report)?;
    write_json(&dir.join(SELECTED_VOCAB_FILE), selected)
}

/// Ensemble manifest: everything but the member weights, plus integrity
/// hashes over the member and support files.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct EnsembleManifest {
    pub protocol: ProtocolConfig,
    pub threshold: f64,
    pub members: Vec<String>,
    pub vocabulary_file: String,
    pub stats_file: String,
    pub vocabulary_sha256: String,
    pub stats_sha256: String,
    pub member_sha256: Vec<String>,
}

pub fn write_ensemble(dir: &Path, ensemble: &EnsembleModel) -> Result<(), ArtifactError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join(VOCAB_FILE), &ensemble.vocabulary)?;
    write_json(&dir.join(STATS_FILE), &ensemble.stats)?;
    let mut members = Vec::new();
    let mut member_sha256 = Vec::new();
    for (i, params) in ensemble.members.iter().enumerate() {
        let name = format!("member_{i:02}.json");
        write_json(&dir.join(&name), params)?;
        member_sha256.push(sha256_hex(&dir.join(&name))?);
        members.push(name);
    }
    let manifest = EnsembleManifest {
        protocol: ensemble.protocol.clone(),
        threshold: ensemble.threshold,
        members,
        vocabulary_file: VOCAB_FILE.to_string(),
        stats_file: STATS_FILE.to_string(),
        vocabulary_sha256: sha256_hex(&dir.join(VOCAB_FILE))?,
        stats_sha256: sha256_hex(&dir.join(STATS_FILE))?,
        member_sha256,
    };
    write_json(&dir.join(ENSEMBLE_MANIFEST_FILE), &manifest)
}

pub fn read_ensemble(dir: &Path) -> Result<EnsembleModel, ArtifactError> {
    let manifest_path = dir.join(ENSEMBLE_MANIFEST_FILE);
    let manifest: EnsembleManifest = read_json(&manifest_path)?;
    let vocab_path = dir.join(&manifest.vocabulary_file);
    if sha256_hex(&vocab_path)? != manifest.vocabulary_sha256 {
        return Err(format_err(&vocab_path, "vocabulary hash mismatch"));
    }
    let stats_path = dir.join(&manifest.stats_file);
    if sha256_hex(&stats_path)? != manifest.stats_sha256 {
        return Err(format_err(&stats_path, "stats hash mismatch"));
    }
    let vocabulary: ConceptVocabulary = read_json(&vocab_path)?;
    let stats: NormalizationStats = read_json(&stats_path)?;
    let mut members = Vec::new();
    for (name, expected) in manifest.members.iter().zip(&manifest.member_sha256) {
        let path = dir.join(name);
        if &sha256_hex(&path)? != expected {
            return Err(format_err(&path, "member hash mismatch"));
        }
        let params: MlpParams = read_json(&path)?;
        members.push(params);
    }
    Ok(EnsembleModel {
        members,
        vocabulary,
        stats,
        threshold: manifest.threshold,
        protocol: manifest.protocol,
    })
}

pub fn write_predictions(
    path: &Path,
    person_ids: &[String],
    scores: &[f64],
    calls: &[u8],
) -> Result<(), ArtifactError> {
    let mut file = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(file, "person_id,score,call").map_err(|e| io_err(path, e))?;
    for ((id, score), call) in person_ids.iter().zip(scores).zip(calls) {
        writeln!(file, "{id},{score},{call}").map_err(|e| io_err(path, e))?;
    }
    file.flush().map_err(|e| io_err(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, f64, u8)>, ArtifactError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if lineno == 0 {
            if line != "person_id,score,call" {
                return Err(format_err(path, format!("bad header {line:?}")));
            }
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let bad = || format_err(path, format!("bad prediction at line {lineno}"));
        let id = parts.next().ok_or_else(bad)?.to_string();
        let score: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let call: u8 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        out.push((id, score, call));
    }
    Ok(out)
}

/// Refuse to clobber existing output unless forced. Checks a single path,
/// file or directory.
pub fn guard_overwrite(path: &Path, force: bool) -> Result<(), ArtifactError> {
    if path.exists() && !force {
        return Err(ArtifactError::Exists(path.to_path_buf()));
    }
    if force && path.exists() {
        if path.is_dir() {
            std::fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
        } else {
            std::fs::remove_file(path).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{FeatureFamily, FeatureKey};

    fn sample_matrix() -> (SparseMatrix, Vec<u8>, ConceptVocabulary) {
        let vocab = ConceptVocabulary::from_keys(vec![
            FeatureKey::new(FeatureFamily::ConditionId, "a"),
            FeatureKey::new(FeatureFamily::ConditionId, "b"),
            FeatureKey::new(FeatureFamily::MeasurementId, "m"),
        ])
        .unwrap();
        let matrix = SparseMatrix {
            n_features: 3,
            rows: vec![
                vec![(0, 1.0), (2, 0.123456789012345)],
                vec![],
                vec![(1, 7.0)],
            ],
            row_ids: vec!["p1".into(), "p2".into(), "p3".into()],
        };
        (matrix, vec![1, 0, 0], vocab)
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (matrix, labels, _) = sample_matrix();
        let triplets = dir.path().join("m.csv");
        let rows = dir.path().join("rows.csv");
        write_matrix(&triplets, &rows, &matrix, &labels).unwrap();
        let (back, back_labels) = read_matrix(&triplets, &rows, 3).unwrap();
        assert_eq!(back, matrix);
        assert_eq!(back_labels, labels);
    }

    #[test]
    fn vocab_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, vocab) = sample_matrix();
        let path = dir.path().join("vocab.json");
        write_json(&path, &vocab).unwrap();
        let back: ConceptVocabulary = read_json(&path).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.index_of(&FeatureKey::new(FeatureFamily::ConditionId, "b")), Some(1));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let ids = vec!["x".to_string(), "y".to_string()];
        let scores = vec![0.25, 0.7500000000000001];
        let calls = vec![0u8, 1];
        write_predictions(&path, &ids, &scores, &calls).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], ("y".to_string(), 0.7500000000000001, 1));
    }

    #[test]
    fn guard_refuses_then_forces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out");
        std::fs::create_dir(&path).unwrap();
        assert!(matches!(
            guard_overwrite(&path, false),
            Err(ArtifactError::Exists(_))
        ));
        guard_overwrite(&path, true).unwrap();
        assert!(!path.exists());
    }

    #[test]
    fn corrupted_member_hash_detected() {
        use crate::config::ProtocolConfig;
        use crate::models::mlp_init;
        let dir = tempfile::tempdir().unwrap();
        let (_, _, vocab) = sample_matrix();
        let stats = NormalizationStats {
            columns: vocab
                .keys()
                .iter()
                .map(|k| crate::featurize::ColumnStats {
                    family: k.family,
                    min: 1.0,
                    max: 2.0,
                    c: 0.1,
                })
                .collect(),
        };
        let ensemble = EnsembleModel {
            members: vec![mlp_init(3, 1, Default::default())],
            vocabulary: vocab,
            stats,
            threshold: 0.5,
            protocol: ProtocolConfig::task1(),
        };
        write_ensemble(dir.path(), &ensemble).unwrap();
        let loaded = read_ensemble(dir.path()).unwrap();
        assert_eq!(loaded.members.len(), 1);
        assert_eq!(loaded.threshold, 0.5);

        // Flip a byte in a member file: the hash check must catch it.
        let member = dir.path().join("member_00.json");
        let mut bytes = std::fs::read(&member).unwrap();
        let idx = bytes.len() / 2;
        bytes[idx] = bytes[idx].wrapping_add(1);
        std::fs::write(&member, bytes).unwrap();
        assert!(matches!(
            read_ensemble(dir.path()),
            Err(ArtifactError::Format { .. })
        ));
    }
}
