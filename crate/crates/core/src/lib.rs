//! End-to-end risk prediction over OMOP-lite cohorts: CSV ingestion,
//! bag-of-concepts sparse featurization with min-max style normalization,
//! logistic-regression feature screening, from-scratch MLP training with
//! negative undersampling / auPRC early stopping / trial ensembling, and
//! ranking-metric evaluation (auROC, auPRC, F2).
//!
//! The `synth` module generates synthetic cohorts with plantable signal so
//! the whole pipeline is runnable and testable without access to real
//! clinical data.

pub mod artifacts;
pub mod config;
pub mod featurize;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod seeds;
pub mod select;
pub mod synth;
pub mod train;

pub use config::{PipelineConfig, TaskProfile};
