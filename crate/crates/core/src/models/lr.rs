//! Sparse logistic regression trained by full-batch gradient descent on
//! binary cross-entropy with L2. Deterministic: zero init, no randomness.

use serde::{Deserialize, Serialize};

use super::{bce, sigmoid, ModelError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            learning_rate: 1.0,
            epochs: 300,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LrModel {
    fn score_row(&self, row: &[(usize, f64)]) -> f64 {
        // Sparse dot product: missing entries are 0 and contribute nothing.
        let z: f64 = self.bias
            + row
                .iter()
                .map(|&(c, v)| self.weights[c] * v)
                .sum::<f64>();
        sigmoid(z)
    }
}

/// Loss and gradient of mean BCE + l2 * sum(w^2) at the given parameters.
fn loss_and_grad(
    rows: &[Vec<(usize, f64)>],
    labels: &[u8],
    model: &LrModel,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut grad_w = vec![0.0; model.weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (row, &y) in rows.iter().zip(labels) {
        let p = model.score_row(row);
        let y = y as f64;
        loss += bce(p, y);
        let d = (p - y) / n;
        grad_b += d;
        for &(c, v) in row {
            grad_w[c] += d * v;
        }
    }
    loss /= n;
    for (g, w) in grad_w.iter_mut().zip(&model.weights) {
        loss += l2 * w * w;
        *g += 2.0 * l2 * w;
    }
    (loss, grad_w, grad_b)
}

pub fn lr_train(
    rows: &[Vec<(usize, f64)>],
    n_features: usize,
    labels: &[u8],
    config: &LrConfig,
) -> Result<LrModel, ModelError> {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(ModelError::SingleClassInput);
    }
    let mut model = LrModel {
        weights: vec![0.0; n_features],
        bias: 0.0,
    };
    for _ in 0..config.epochs {
        let (_, grad_w, grad_b) = loss_and_grad(rows, labels, &model, config.l2);
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= config.learning_rate * g;
        }
        model.bias -= config.learning_rate * grad_b;
    }
    Ok(model)
}

pub fn lr_predict(model: &LrModel, rows: &[Vec<(usize, f64)>]) -> Result<Vec<f64>, ModelError> {
    for row in rows {
        if let Some(&(c, _)) = row.iter().max_by_key(|&&(c, _)| c) {
            if c >= model.weights.len() {
                return Err(ModelError::DimensionMismatch {
                    expected: model.weights.len(),
                    got: c + 1,
                });
            }
        }
    }
    Ok(rows.iter().map(|r| model.score_row(r)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{auroc, ScoredLabels};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_1d_reaches_perfect_auroc() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let v = if y == 1 { 1.0 } else { 0.1 };
            rows.push(vec![(0usize, v)]);
            labels.push(y as u8);
        }
        let model = lr_train(&rows, 1, &labels, &LrConfig::default()).unwrap();
        let scores = lr_predict(&model, &rows).unwrap();
        let d = ScoredLabels::new(scores, labels).unwrap();
        assert_eq!(auroc(&d).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_column_only_shrinks() {
        // Column 1 never observed: its weight stays at 0 under pure L2
        // shrinkage from a zero start.
        let rows = vec![vec![(0, 1.0)], vec![(0, 0.2)]];
        let labels = vec![1u8, 0u8];
        let model = lr_train(&rows, 2, &labels, &LrConfig::default()).unwrap();
        assert_eq!(model.weights[1], 0.0);
        assert!(model.weights[0] != 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let rows = vec![vec![(0, 1.0)], vec![(0, 0.5)]];
        assert_eq!(
            lr_train(&rows, 1, &[1, 1], &LrConfig::default()).unwrap_err(),
            ModelError::SingleClassInput
        );
    }

    #[test]
    fn zero_model_predicts_half() {
        let model = LrModel {
            weights: vec![0.0; 3],
            bias: 0.0,
        };
        let scores = lr_predict(&model, &[vec![(1, 2.0)], vec![]]).unwrap();
        assert_eq!(scores, vec![0.5, 0.5]);
    }

    #[test]
    fn all_missing_row_scores_sigmoid_bias() {
        let model = LrModel {
            weights: vec![3.0; 2],
            bias: -1.0,
        };
        let scores = lr_predict(&model, &[vec![]]).unwrap();
        assert!((scores[0] - super::sigmoid(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_detected() {
        let model = LrModel {
            weights: vec![0.0; 2],
            bias: 0.0,
        };
        assert!(matches!(
            lr_predict(&model, &[vec![(5, 1.0)]]),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let model = LrModel {
            weights: vec![5.0],
            bias: 2.0,
        };
        let scores = lr_predict(&model, &[vec![(0, 1.0)], vec![(0, -1.0)]]).unwrap();
        for s in scores {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..20 {
            let n_features = rng.random_range(2..8);
            let n_rows = rng.random_range(3..12);
            let rows: Vec<Vec<(usize, f64)>> = (0..n_rows)
                .map(|_| {
                    let mut row = Vec::new();
                    for c in 0..n_features {
                        if rng.random::<f64>() < 0.7 {
                            row.push((c, rng.random::<f64>()));
                        }
                    }
                    row
                })
                .collect();
            let labels: Vec<u8> = (0..n_rows).map(|_| rng.random_range(0..=1)).collect();
            let model = LrModel {
                weights: (0..n_features).map(|_| rng.random::<f64>() - 0.5).collect(),
                bias: rng.random::<f64>() - 0.5,
            };
            let l2 = 0.01;
            let (_, grad_w, grad_b) = loss_and_grad(&rows, &labels, &model, l2);
            let h = 1e-6;
            let check = |analytic: f64, perturb: &dyn Fn(&mut LrModel, f64)| {
                let mut plus = model.clone();
                perturb(&mut plus, h);
                let mut minus = model.clone();
                perturb(&mut minus, -h);
                let (lp, _, _) = loss_and_grad(&rows, &labels, &plus, l2);
                let (lm, _, _) = loss_and_grad(&rows, &labels, &minus, l2);
                let fd = (lp - lm) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() <= 1e-6,
                    "case {case}: analytic {analytic} vs fd {fd}"
                );
            };
            for (j, &g) in grad_w.iter().enumerate() {
                check(g, &move |m: &mut LrModel, d: f64| m.weights[j] += d);
            }
            check(grad_b, &|m: &mut LrModel, d: f64| m.bias += d);
        }
    }
}
