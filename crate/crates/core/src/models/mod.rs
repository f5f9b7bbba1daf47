//! From-scratch learners: logistic regression (screening and baseline) and
//! the fixed-architecture MLP (100/100/64/1 with ReLU, batch normalization,
//! inverted dropout, L2 on the 64-unit layer, sigmoid output, Adam).

pub mod lr;
pub mod mlp;

use thiserror::Error;

pub use lr::{lr_predict, lr_train, LrConfig, LrModel};
pub use mlp::{
    ensemble_predict, mlp_forward, mlp_infer, mlp_infer_sparse, mlp_init, mlp_train_step,
    AdamState, ForwardMode, MlpConfig, MlpParams,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("training data contains a single class")]
    SingleClassInput,
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("train-mode batch needs at least 2 rows, got {0}")]
    EmptyBatch(usize),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("ensemble has no members")]
    EmptyEnsemble,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically safe binary cross-entropy for a single prediction.
pub(crate) fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
