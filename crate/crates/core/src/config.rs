//! Pipeline configuration: task profiles and the serialized config consumed
//! by the CLI. Defaults follow the study protocol this pipeline reimplements
//! (validation fractions, trial counts, patience 20, learning rate 1e-4).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{FeatureFamily, FeaturizeConfig};
use crate::models::MlpConfig;
use crate::select::{PolicyMode, SelectConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskProfile {
    /// Rare outcome (~2.7% positive): negative undersampling, 10 trials of
    /// 10 repeats, all 10 trial winners ensembled. Demographics, payer, and
    /// age are excluded from features.
    Task1,
    /// Moderately imbalanced outcome (~8.8% positive): no undersampling,
    /// 25 single-repeat trials, top 20 by auPRC + auROC + F2 ensembled.
    /// Demographics are included (ethnicity stays off).
    Task2,
}

impl TaskProfile {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskProfile::Task1 => "task1",
            TaskProfile::Task2 => "task2",
        }
    }
}

impl std::str::FromStr for TaskProfile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "task1" => Ok(TaskProfile::Task1),
            "task2" => Ok(TaskProfile::Task2),
            other => Err(ConfigError::Invalid {
                field: "task",
                message: format!("unknown task profile {other:?} (expected task1 or task2)"),
            }),
        }
    }
}

/// Training protocol knobs for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub task: TaskProfile,
    /// Fraction of training rows held out for validation inside each trial.
    pub validation_fraction: f64,
    /// Fraction of negatives kept when undersampling; None disables it.
    pub negative_sample_fraction: Option<f64>,
    /// Model fits per trial; the best validation auPRC wins the trial.
    pub inner_repeats: usize,
    pub outer_trials: usize,
    pub ensemble_size: usize,
    /// Epochs without strict validation auPRC improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mlp: MlpConfig,
    /// Decision threshold for binary calls (score >= threshold).
    pub threshold: f64,
    /// Replace the threshold by the F2-maximizing value over pooled
    /// validation predictions after training.
    pub calibrate_threshold: bool,
}

impl ProtocolConfig {
    pub fn task1() -> Self {
        ProtocolConfig {
            task: TaskProfile::Task1,
            validation_fraction: 0.10,
            negative_sample_fraction: Some(0.10),
            inner_repeats: 10,
            outer_trials: 10,
            ensemble_size: 10,
            patience: 20,
            max_epochs: 500,
            batch_size: 256,
            learning_rate: 1e-4,
            mlp: MlpConfig::default(),
            threshold: 0.5,
            calibrate_threshold: false,
        }
    }

    pub fn task2() -> Self {
        ProtocolConfig {
            task: TaskProfile::Task2,
            validation_fraction: 0.05,
            negative_sample_fraction: None,
            inner_repeats: 1,
            outer_trials: 25,
            ensemble_size: 20,
            ..Self::task1()
        }
    }

    pub fn for_task(task: TaskProfile) -> Self {
        match task {
            TaskProfile::Task1 => Self::task1(),
            TaskProfile::Task2 => Self::task2(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn fraction(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    field,
                    message: format!("{v} is outside (0, 1)"),
                })
            }
        }
        fraction("validation_fraction", self.validation_fraction)?;
        if let Some(f) = self.negative_sample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ConfigError::Invalid {
                    field: "negative_sample_fraction",
                    message: format!("{f} is outside (0, 1]"),
                });
            }
        }
        for (field, v) in [
            ("inner_repeats", self.inner_repeats),
            ("outer_trials", self.outer_trials),
            ("ensemble_size", self.ensemble_size),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid {
                    field,
                    message: "must be at least 1".into(),
                });
            }
        }
        if self.ensemble_size > self.outer_trials {
            return Err(ConfigError::Invalid {
                field: "ensemble_size",
                message: format!(
                    "{} exceeds outer_trials {}",
                    self.ensemble_size, self.outer_trials
                ),
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid {
                field: "learning_rate",
                message: format!("{} must be positive and finite", self.learning_rate),
            });
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Invalid {
                field: "threshold",
                message: format!("{} is outside [0, 1]", self.threshold),
            });
        }
        Ok(())
    }
}

/// Everything a full pipeline run needs, resolvable from a JSON file plus
/// CLI overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: TaskProfile,
    pub featurize: FeaturizeConfig,
    pub select: SelectConfig,
    pub protocol: ProtocolConfig,
    pub seed: u64,
}

impl PipelineConfig {
    /// Profile defaults. Task 1 drops demographics, payer, and age and uses
    /// drop_negative_only; Task 2 keeps demographics (not ethnicity) and
    /// uses the count-thresholded negative-only rule.
    pub fn for_task(task: TaskProfile) -> Self {
        let featurize = match task {
            TaskProfile::Task1 => {
                let mut cfg = FeaturizeConfig::default();
                for family in [
                    FeatureFamily::DemoGender,
                    FeatureFamily::DemoRace,
                    FeatureFamily::DemoEthnicity,
                    FeatureFamily::Age,
                ] {
                    cfg.families.remove(&family);
                }
                cfg
            }
            TaskProfile::Task2 => FeaturizeConfig::without_ethnicity(),
        };
        let select = match task {
            TaskProfile::Task1 => SelectConfig::default(),
            TaskProfile::Task2 => SelectConfig {
                policy_mode: PolicyMode::KeepNegativeOnlyIfCountGe(2),
                ..SelectConfig::default()
            },
        };
        PipelineConfig {
            task,
            featurize,
            select,
            protocol: ProtocolConfig::for_task(task),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.task != self.protocol.task {
            return Err(ConfigError::Invalid {
                field: "protocol.task",
                message: format!(
                    "protocol task {} does not match pipeline task {}",
                    self.protocol.task.as_str(),
                    self.task.as_str()
                ),
            });
        }
        self.protocol.validate()?;
        self.select.validate().map_err(|message| ConfigError::Invalid {
            field: "select",
            message,
        })?;
        if self.featurize.families.is_empty() {
            return Err(ConfigError::Invalid {
                field: "featurize.families",
                message: "no feature families enabled".into(),
            });
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                source: e,
            })?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_defaults_match_protocol() {
        let t1 = ProtocolConfig::task1();
        assert_eq!(t1.validation_fraction, 0.10);
        assert_eq!(t1.negative_sample_fraction, Some(0.10));
        assert_eq!(t1.inner_repeats, 10);
        assert_eq!(t1.outer_trials, 10);
        assert_eq!(t1.ensemble_size, 10);
        assert_eq!(t1.patience, 20);
        assert_eq!(t1.max_epochs, 500);
        assert_eq!(t1.batch_size, 256);
        assert_eq!(t1.learning_rate, 1e-4);

        let t2 = ProtocolConfig::task2();
        assert_eq!(t2.validation_fraction, 0.05);
        assert_eq!(t2.negative_sample_fraction, None);
        assert_eq!(t2.inner_repeats, 1);
        assert_eq!(t2.outer_trials, 25);
        assert_eq!(t2.ensemble_size, 20);
    }

    #[test]
    fn task1_profile_excludes_demographics_and_age() {
        let cfg = PipelineConfig::for_task(TaskProfile::Task1);
        for family in [
            FeatureFamily::DemoGender,
            FeatureFamily::DemoRace,
            FeatureFamily::DemoEthnicity,
            FeatureFamily::Age,
        ] {
            assert!(!cfg.featurize.enabled(family), "{family} should be off");
        }
        assert!(cfg.featurize.enabled(FeatureFamily::ConditionId));
        cfg.validate().unwrap();
    }

    #[test]
    fn task2_profile_includes_demographics_without_ethnicity() {
        let cfg = PipelineConfig::for_task(TaskProfile::Task2);
        assert!(cfg.featurize.enabled(FeatureFamily::DemoGender));
        assert!(cfg.featurize.enabled(FeatureFamily::DemoRace));
        assert!(!cfg.featurize.enabled(FeatureFamily::DemoEthnicity));
        assert!(cfg.featurize.enabled(FeatureFamily::Age));
        assert!(matches!(
            cfg.select.policy_mode,
            PolicyMode::KeepNegativeOnlyIfCountGe(2)
        ));
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_fraction_rejected() {
        let mut cfg = ProtocolConfig::task1();
        cfg.validation_fraction = 1.5;
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::Invalid {
                field: "validation_fraction",
                ..
            })
        ));
    }

    #[test]
    fn ensemble_larger_than_trials_rejected() {
        let mut cfg = ProtocolConfig::task2();
        cfg.ensemble_size = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = PipelineConfig::for_task(TaskProfile::Task2);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.protocol.outer_trials, 25);
    }
}
