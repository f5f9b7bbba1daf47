//! Synthetic OMOP-lite cohort generator with plantable concept-level
//! signal. Labels come from a logistic model over planted concept
//! occurrences, so the Bayes-optimal ranking is known exactly and end-to-end
//! tests can compare trained models against it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CohortManifest, Domain};
use crate::models::sigmoid;
use crate::seeds::derive_seed;

/// One planted signal: carriers of the concept get `weight` added to their
/// risk logit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalSpec {
    pub domain: Domain,
    pub concept_id: String,
    pub weight: f64,
    /// Probability a patient carries the concept at all.
    pub carrier_prob: f64,
}

/// A planted exclusive pair: the weight applies when exactly one of the
/// two concepts is carried. Additive models cannot represent this, which
/// gives nonlinear learners measurable headroom over logistic regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionSpec {
    pub domain_a: Domain,
    pub concept_a: String,
    pub carrier_prob_a: f64,
    pub domain_b: Domain,
    pub concept_b: String,
    pub carrier_prob_b: f64,
    pub weight: f64,
}

impl InteractionSpec {
    /// Probability that exactly one concept is carried.
    fn xor_prob(&self) -> f64 {
        self.carrier_prob_a * (1.0 - self.carrier_prob_b)
            + (1.0 - self.carrier_prob_a) * self.carrier_prob_b
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Target positive fraction; the logit bias is calibrated to hit it in
    /// expectation.
    pub prevalence: f64,
    /// Background (non-signal) concepts per event domain.
    pub concepts_per_domain: usize,
    /// Distinct measurement concepts.
    pub n_measurement_concepts: usize,
    /// Mean background events per patient per domain (geometric tail).
    pub background_rate: f64,
    /// Standard deviation of measurement values around their per-concept
    /// baseline.
    pub measurement_noise: f64,
    pub signals: Vec<SignalSpec>,
    #[serde(default)]
    pub interactions: Vec<InteractionSpec>,
    pub max_age_years: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Mirrors the rare-outcome task scale: 20,000 patients, 2.7%
        // positive, a handful of strong signal concepts.
        let signals = vec![
            SignalSpec {
                domain: Domain::Condition,
                concept_id: "SIG_COND_1".into(),
                weight: 3.0,
                carrier_prob: 0.05,
            },
            SignalSpec {
                domain: Domain::Condition,
                concept_id: "SIG_COND_2".into(),
                weight: 2.0,
                carrier_prob: 0.08,
            },
            SignalSpec {
                domain: Domain::Drug,
                concept_id: "SIG_DRUG_1".into(),
                weight: 2.5,
                carrier_prob: 0.06,
            },
            SignalSpec {
                domain: Domain::Procedure,
                concept_id: "SIG_PROC_1".into(),
                weight: 1.5,
                carrier_prob: 0.10,
            },
        ];
        SynthConfig {
            n_patients: 20_000,
            prevalence: 0.027,
            concepts_per_domain: 40,
            n_measurement_concepts: 10,
            background_rate: 3.0,
            measurement_noise: 1.0,
            signals,
            interactions: Vec::new(),
            max_age_years: 21,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_patients < 10 {
            return Err(SynthError::InvalidConfig {
                field: "n_patients",
                message: format!("{} is below the minimum of 10", self.n_patients),
            });
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(SynthError::InvalidConfig {
                field: "prevalence",
                message: format!("{} is outside (0, 1)", self.prevalence),
            });
        }
        if self.concepts_per_domain < 1 || self.n_measurement_concepts < 1 {
            return Err(SynthError::InvalidConfig {
                field: "concepts_per_domain",
                message: "vocabulary sizes must be at least 1".into(),
            });
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return Err(SynthError::InvalidConfig {
                field: "background_rate",
                message: format!("{} must be finite and non-negative", self.background_rate),
            });
        }
        for s in &self.signals {
            if !(0.0..=1.0).contains(&s.carrier_prob) {
                return Err(SynthError::InvalidConfig {
                    field: "signals",
                    message: format!(
                        "carrier_prob {} for {} is outside [0, 1]",
                        s.carrier_prob, s.concept_id
                    ),
                });
            }
            if !s.weight.is_finite() {
                return Err(SynthError::InvalidConfig {
                    field: "signals",
                    message: format!("weight for {} is not finite", s.concept_id),
                });
            }
        }
        for i in &self.interactions {
            for (name, p) in [("carrier_prob_a", i.carrier_prob_a), ("carrier_prob_b", i.carrier_prob_b)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SynthError::InvalidConfig {
                        field: "interactions",
                        message: format!(
                            "{name} {p} for pair ({}, {}) is outside [0, 1]",
                            i.concept_a, i.concept_b
                        ),
                    });
                }
            }
            if !i.weight.is_finite() {
                return Err(SynthError::InvalidConfig {
                    field: "interactions",
                    message: format!(
                        "weight for pair ({}, {}) is not finite",
                        i.concept_a, i.concept_b
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    /// Calibrated intercept of the label model.
    pub bias: f64,
    pub signals: Vec<SignalSpec>,
    #[serde(default)]
    pub interactions: Vec<InteractionSpec>,
    /// True risk logit per patient, in person_id order.
    pub logits: Vec<(String, f64)>,
    pub realized_prevalence: f64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config field {field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize {what}: {source}")]
    Serialize {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Independent logit contributions: each (probability, weight) pair fires
/// independently of the others. Signals fire when carried; exclusive pairs
/// fire when exactly one member is carried.
fn contributions(config: &SynthConfig) -> Vec<(f64, f64)> {
    config
        .signals
        .iter()
        .map(|s| (s.carrier_prob, s.weight))
        .chain(config.interactions.iter().map(|i| (i.xor_prob(), i.weight)))
        .collect()
}

/// Expected prevalence at a given bias, marginalizing over independent
/// contribution draws. Exact subset enumeration up to 16 terms,
/// deterministic Monte Carlo beyond.
fn expected_prevalence(bias: f64, terms: &[(f64, f64)], seed: u64) -> f64 {
    if terms.len() <= 16 {
        let mut total = 0.0;
        for mask in 0u32..(1 << terms.len()) {
            let mut prob = 1.0;
            let mut logit = bias;
            for (i, &(p, w)) in terms.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    prob *= p;
                    logit += w;
                } else {
                    prob *= 1.0 - p;
                }
            }
            total += prob * sigmoid(logit);
        }
        total
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["calibrate"]));
        let samples = 200_000;
        let mut total = 0.0;
        for _ in 0..samples {
            let mut logit = bias;
            for &(p, w) in terms {
                if rng.random::<f64>() < p {
                    logit += w;
                }
            }
            total += sigmoid(logit);
        }
        total / samples as f64
    }
}

/// Bisection for the bias hitting the target prevalence in expectation.
/// Monotone in bias, so plain bisection converges.
pub fn calibrate_bias(config: &SynthConfig) -> f64 {
    let target = config.prevalence;
    let terms = contributions(config);
    let mut lo = -40.0;
    let mut hi = 40.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_prevalence(mid, &terms, config.seed) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct PatientData {
    person_id: String,
    age: u32,
    gender: &'static str,
    race: &'static str,
    ethnicity: &'static str,
    events: Vec<(Domain, String, String)>,
    measurements: Vec<(String, f64, String)>,
    logit: f64,
    label: u8,
}

fn random_date(rng: &mut ChaCha8Rng) -> String {
    format!(
        "2020-{:02}-{:02}",
        rng.random_range(1..=12),
        rng.random_range(1..=28)
    )
}

/// Geometric-tailed event count with the given mean.
fn background_count(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let p = rate / (1.0 + rate);
    let mut n = 0;
    while n < 50 && rng.random::<f64>() < p {
        n += 1;
    }
    n
}

fn generate_patient(index: usize, config: &SynthConfig, bias: f64) -> PatientData {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["patient", &index.to_string()]));
    let person_id = format!("P{index:06}");
    let age = rng.random_range(0..=config.max_age_years);
    let gender = if rng.random::<f64>() < 0.5 { "8507" } else { "8532" };
    let race = ["8527", "8516", "8515", "8657"][rng.random_range(0..4)];
    let ethnicity = if rng.random::<f64>() < 0.2 { "38003563" } else { "38003564" };

    let mut events: Vec<(Domain, String, String)> = Vec::new();
    let mut logit = bias;
    for s in &config.signals {
        if rng.random::<f64>() < s.carrier_prob {
            logit += s.weight;
            let copies = 1 + background_count(&mut rng, 0.5);
            for _ in 0..copies {
                events.push((s.domain, s.concept_id.clone(), random_date(&mut rng)));
            }
        }
    }
    for i in &config.interactions {
        let carries_a = rng.random::<f64>() < i.carrier_prob_a;
        let carries_b = rng.random::<f64>() < i.carrier_prob_b;
        if carries_a != carries_b {
            logit += i.weight;
        }
        for (carried, domain, concept) in [
            (carries_a, i.domain_a, &i.concept_a),
            (carries_b, i.domain_b, &i.concept_b),
        ] {
            if carried {
                let copies = 1 + background_count(&mut rng, 0.5);
                for _ in 0..copies {
                    events.push((domain, concept.clone(), random_date(&mut rng)));
                }
            }
        }
    }
    for &domain in &Domain::DISCRETE {
        let count = background_count(&mut rng, config.background_rate);
        for _ in 0..count {
            let c = rng.random_range(0..config.concepts_per_domain);
            events.push((
                domain,
                format!("{}_{c:03}", domain.as_str().to_uppercase()),
                random_date(&mut rng),
            ));
        }
    }

    let mut measurements = Vec::new();
    for m in 0..config.n_measurement_concepts {
        if rng.random::<f64>() < 0.5 {
            let base = 10.0 * (m as f64 + 1.0);
            let noise: f64 = rng.sample(StandardNormal);
            measurements.push((
                format!("MEAS_{m:03}"),
                base + config.measurement_noise * noise,
                random_date(&mut rng),
            ));
        }
    }

    let label = u8::from(rng.random::<f64>() < sigmoid(logit));
    PatientData {
        person_id,
        age,
        gender,
        race,
        ethnicity,
        events,
        measurements,
        logit,
        label,
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), SynthError> {
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(file, "{header}").map_err(|e| io_err(path, e))?;
    for row in rows {
        writeln!(file, "{row}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Generate a full cohort directory: the standard OMOP-lite CSVs, a
/// manifest, and ground_truth.json. Byte-identical for identical configs.
pub fn generate_cohort(config: &SynthConfig, out_dir: &Path) -> Result<SynthGroundTruth, SynthError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let bias = calibrate_bias(config);

    let patients: Vec<PatientData> = (0..config.n_patients)
        .map(|i| generate_patient(i, config, bias))
        .collect();

    let person_rows: Vec<String> = patients
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{}",
                p.person_id, p.age, p.gender, p.race, p.ethnicity
            )
        })
        .collect();
    write_csv(
        &out_dir.join("person.csv"),
        "person_id,age,gender_concept_id,race_concept_id,ethnicity_concept_id",
        &person_rows,
    )?;

    for &domain in &Domain::DISCRETE {
        let rows: Vec<String> = patients
            .iter()
            .flat_map(|p| {
                p.events
                    .iter()
                    .filter(|(d, _, _)| *d == domain)
                    .map(|(_, concept, date)| format!("{},{},{}", p.person_id, concept, date))
            })
            .collect();
        write_csv(
            &out_dir.join(format!("{}.csv", domain.as_str())),
            "person_id,concept_id,event_date",
            &rows,
        )?;
    }

    let measurement_rows: Vec<String> = patients
        .iter()
        .flat_map(|p| {
            p.measurements
                .iter()
                .map(|(concept, value, date)| {
                    format!("{},{},{value:.6},{date}", p.person_id, concept)
                })
        })
        .collect();
    write_csv(
        &out_dir.join("measurement.csv"),
        "person_id,concept_id,value,event_date",
        &measurement_rows,
    )?;

    // Concept sets: group background ids in fives; signal concepts get
    // their own singleton sets so set families can carry signal too.
    let mut set_rows = Vec::new();
    for &domain in &Domain::DISCRETE {
        for c in 0..config.concepts_per_domain {
            set_rows.push(format!(
                "{},{}_{c:03},{}_SET_{:02}",
                domain.as_str(),
                domain.as_str().to_uppercase(),
                domain.as_str().to_uppercase(),
                c / 5
            ));
        }
    }
    for s in &config.signals {
        set_rows.push(format!(
            "{},{},SET_{}",
            s.domain.as_str(),
            s.concept_id,
            s.concept_id
        ));
    }
    for i in &config.interactions {
        for (domain, concept) in [(i.domain_a, &i.concept_a), (i.domain_b, &i.concept_b)] {
            set_rows.push(format!("{},{concept},SET_{concept}", domain.as_str()));
        }
    }
    write_csv(
        &out_dir.join("concept_set_map.csv"),
        "domain,concept_id,concept_set_id",
        &set_rows,
    )?;

    let label_rows: Vec<String> = patients
        .iter()
        .map(|p| format!("{},{}", p.person_id, p.label))
        .collect();
    write_csv(&out_dir.join("labels.csv"), "person_id,label", &label_rows)?;

    let manifest = CohortManifest::standard();
    let manifest_path = out_dir.join("manifest.json");
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SynthError::Serialize {
            what: "manifest",
            source: e,
        })?;
    std::fs::write(&manifest_path, manifest_json + "\n")
        .map_err(|e| io_err(&manifest_path, e))?;

    let positives = patients.iter().filter(|p| p.label == 1).count();
    let truth = SynthGroundTruth {
        bias,
        signals: config.signals.clone(),
        interactions: config.interactions.clone(),
        logits: patients
            .iter()
            .map(|p| (p.person_id.clone(), p.logit))
            .collect(),
        realized_prevalence: positives as f64 / patients.len() as f64,
    };
    let truth_path = out_dir.join("ground_truth.json");
    let truth_json = serde_json::to_string_pretty(&truth).map_err(|e| SynthError::Serialize {
        what: "ground truth",
        source: e,
    })?;
    std::fs::write(&truth_path, truth_json + "\n").map_err(|e| io_err(&truth_path, e))?;
    Ok(truth)
}

/// Stratified holdout split over (person_id, label) pairs: disjoint,
/// exhaustive, test prevalence within one patient of overall.
pub fn split_holdout(
    labeled: &[(String, u8)],
    fraction: f64,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut by_class: BTreeMap<u8, Vec<&String>> = BTreeMap::new();
    for (id, label) in labeled {
        by_class.entry(*label).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut ids) in by_class {
        ids.sort();
        ids.shuffle(&mut rng);
        let take = (ids.len() as f64 * fraction).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            if i < take {
                test.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
    }
    train.sort();
    test.sort();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_cohort, IngestOptions};
    use std::collections::HashSet;

    fn small_config(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 400,
            concepts_per_domain: 10,
            n_measurement_concepts: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rejects_bad_prevalence() {
        let config = SynthConfig {
            prevalence: 1.5,
            ..SynthConfig::default()
        };
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("prevalence"));
    }

    #[test]
    fn calibrated_bias_hits_target_in_expectation() {
        for target in [0.027, 0.088, 0.3] {
            let config = SynthConfig {
                prevalence: target,
                ..SynthConfig::default()
            };
            let bias = calibrate_bias(&config);
            let achieved = expected_prevalence(bias, &contributions(&config), config.seed);
            assert!(
                (achieved - target).abs() < 1e-9,
                "target {target}, achieved {achieved}"
            );
        }
    }

    #[test]
    fn generated_cohort_loads_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(5);
        let truth = generate_cohort(&config, dir.path()).unwrap();
        let manifest = CohortManifest::load(&dir.path().join("manifest.json")).unwrap();
        let cohort =
            load_cohort(dir.path(), &manifest, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.persons.len(), 400);
        assert_eq!(cohort.labels.len(), 400);
        assert_eq!(truth.logits.len(), 400);
        // Every signal carrier's events reference mapped concepts.
        assert!(!cohort.concept_sets.is_empty());
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = small_config(9);
        generate_cohort(&config, dir_a.path()).unwrap();
        generate_cohort(&config, dir_b.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.contains(&"person.csv".to_string()));
        for name in names {
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn realized_prevalence_tracks_target() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n_patients: 5000,
            seed: 21,
            ..SynthConfig::default()
        };
        let truth = generate_cohort(&config, dir.path()).unwrap();
        assert!(
            (truth.realized_prevalence - 0.027).abs() < 0.008,
            "realized {}",
            truth.realized_prevalence
        );
    }

    #[test]
    fn split_holdout_contract() {
        let labeled: Vec<(String, u8)> = (0..2000)
            .map(|i| (format!("P{i:06}"), u8::from(i % 37 == 0)))
            .collect();
        let (train, test) = split_holdout(&labeled, 0.01, 3);
        assert_eq!(test.len() + train.len(), 2000);
        assert_eq!(test.len(), 20);
        let train_set: HashSet<&String> = train.iter().collect();
        assert!(test.iter().all(|id| !train_set.contains(id)));
        // Stratification: overall prevalence ~ 54/2000 = 2.7%; 20 test ids
        // should carry round(0.01 * 55) = 1 positive.
        let labels: std::collections::HashMap<&String, u8> =
            labeled.iter().map(|(id, y)| (id, *y)).collect();
        let test_pos = test.iter().filter(|id| labels[id] == 1).count();
        assert_eq!(test_pos, 1);
    }

    #[test]
    fn exclusive_pair_elevates_risk_only_for_single_carriers() {
        let config = SynthConfig {
            n_patients: 8000,
            prevalence: 0.1,
            signals: Vec::new(),
            interactions: vec![InteractionSpec {
                domain_a: Domain::Condition,
                concept_a: "XA".into(),
                carrier_prob_a: 0.3,
                domain_b: Domain::Drug,
                concept_b: "XB".into(),
                carrier_prob_b: 0.3,
                weight: 4.0,
            }],
            seed: 13,
            ..SynthConfig::default()
        };
        let bias = calibrate_bias(&config);
        // positives / total for (neither or both, exactly one) carriers
        let mut counts = [[0usize; 2]; 2];
        for i in 0..config.n_patients {
            let p = generate_patient(i, &config, bias);
            let a = p.events.iter().any(|(_, c, _)| c == "XA");
            let b = p.events.iter().any(|(_, c, _)| c == "XB");
            let exactly_one = usize::from(a != b);
            counts[exactly_one][0] += 1;
            counts[exactly_one][1] += usize::from(p.label == 1);
        }
        let rate = |row: [usize; 2]| row[1] as f64 / row[0] as f64;
        assert!(counts[0][0] > 100 && counts[1][0] > 100);
        assert!(
            rate(counts[1]) > rate(counts[0]) + 0.2,
            "single-carrier rate {} vs other {}",
            rate(counts[1]),
            rate(counts[0])
        );
    }

    /// Exact mutual information between a binary feature and the label.
    fn mutual_information(pairs: &[(bool, u8)]) -> f64 {
        let n = pairs.len() as f64;
        let mut joint = [[0.0f64; 2]; 2];
        for &(x, y) in pairs {
            joint[usize::from(x)][usize::from(y == 1)] += 1.0;
        }
        let mut mi = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let pxy = joint[x][y] / n;
                if pxy == 0.0 {
                    continue;
                }
                let px = (joint[x][0] + joint[x][1]) / n;
                let py = (joint[0][y] + joint[1][y]) / n;
                mi += pxy * (pxy / (px * py)).ln();
            }
        }
        mi
    }

    #[test]
    fn stronger_weight_never_reduces_mutual_information() {
        let mut previous = -1.0;
        for weight in [0.0, 2.0, 5.0] {
            let config = SynthConfig {
                n_patients: 4000,
                prevalence: 0.1,
                signals: vec![SignalSpec {
                    domain: Domain::Condition,
                    concept_id: "SIG".into(),
                    weight,
                    carrier_prob: 0.2,
                }],
                seed: 7,
                ..SynthConfig::default()
            };
            let bias = calibrate_bias(&config);
            let pairs: Vec<(bool, u8)> = (0..config.n_patients)
                .map(|i| {
                    let p = generate_patient(i, &config, bias);
                    let carries = p.events.iter().any(|(_, c, _)| c == "SIG");
                    (carries, p.label)
                })
                .collect();
            let mi = mutual_information(&pairs);
            assert!(
                mi >= previous - 1e-3,
                "weight {weight}: MI {mi} fell below {previous}"
            );
            previous = mi;
        }
    }
}
