//! Ranking metrics: auROC (tie-aware Mann-Whitney), auPRC (average
//! precision with tie grouping), F2, and full threshold reports with ROC/PR
//! curve points.
//!
//! All functions are pure over immutable inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("only one class present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
}

/// Parallel scores and binary labels, validated on construction.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricError::NonFiniteScore(i));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(MetricError::BadLabel(l));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Indices sorted by descending score, then grouped into tie groups of
    /// (positives, negatives) per distinct score.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap());
        let mut groups = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let s = self.scores[order[i]];
            let mut pos = 0usize;
            let mut neg = 0usize;
            while i < order.len() && self.scores[order[i]] == s {
                if self.labels[order[i]] == 1 {
                    pos += 1;
                } else {
                    neg += 1;
                }
                i += 1;
            }
            groups.push((pos, neg));
        }
        groups
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic: the probability
/// a random positive outscores a random negative, ties counted half.
pub fn auroc(data: &ScoredLabels) -> Result<f64, MetricError> {
    let pos = data.positives();
    let neg = data.negatives();
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // Walk tie groups in descending score order; every negative in a later
    // group is outranked by every positive seen so far.
    let mut wins = 0.0f64;
    let mut pos_above = 0usize;
    for (p, n) in data.tie_groups() {
        wins += (pos_above as f64) * n as f64;
        wins += 0.5 * p as f64 * n as f64;
        pos_above += p;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve in average-precision form: the sum
/// over positives, in descending-score order, of the precision at each
/// recall step. Tied scores are processed as one group, with precision
/// computed after the whole group is included.
pub fn auprc(data: &ScoredLabels) -> Result<f64, MetricError> {
    let pos = data.positives();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut sum = 0.0f64;
    for (p, n) in data.tie_groups() {
        tp += p;
        fp += n;
        if p > 0 {
            sum += p as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// F2 measure: 5PR / (4P + R), recall-weighted. Returns 0 at P = R = 0.
pub fn f2(precision: f64, recall: f64) -> f64 {
    f_beta(precision, recall, 2.0)
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// ROC curve points (fpr, tpr), one per tie group plus the (0,0) origin.
pub fn roc_points(data: &ScoredLabels) -> Vec<(f64, f64)> {
    let pos = data.positives().max(1) as f64;
    let neg = data.negatives().max(1) as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pts = vec![(0.0, 0.0)];
    for (p, n) in data.tie_groups() {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg, tp as f64 / pos));
    }
    pts
}

/// PR curve points (recall, precision), one per tie group.
pub fn pr_points(data: &ScoredLabels) -> Vec<(f64, f64)> {
    let pos = data.positives().max(1) as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pts = Vec::new();
    for (p, n) in data.tie_groups() {
        tp += p;
        fp += n;
        pts.push((tp as f64 / pos, tp as f64 / (tp + fp) as f64));
    }
    pts
}

/// Full evaluation at one decision threshold (score >= threshold is a
/// positive call). Area fields are absent when only one class is present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub f2: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub roc_points: Vec<(f64, f64)>,
    pub pr_points: Vec<(f64, f64)>,
}

pub fn evaluate(data: &ScoredLabels, threshold: f64) -> EvalReport {
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for (&s, &l) in data.scores().iter().zip(data.labels()) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    // Precision is defined as 0 when nothing is predicted positive.
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let single_class = data.positives() == 0 || data.negatives() == 0;
    EvalReport {
        auroc: if single_class { None } else { Some(auroc(data).unwrap()) },
        auprc: if data.positives() == 0 { None } else { Some(auprc(data).unwrap()) },
        f2: f2(precision, recall),
        threshold,
        precision,
        recall,
        tp,
        fp,
        tn,
        fn_,
        roc_points: roc_points(data),
        pr_points: pr_points(data),
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force reference implementations, kept independent of the
    //! production code paths above.
    use super::ScoredLabels;

    /// O(n^2) pair-counting Mann-Whitney statistic.
    pub fn auroc_pairs(data: &ScoredLabels) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..data.len() {
            for j in 0..data.len() {
                if data.labels()[i] == 1 && data.labels()[j] == 0 {
                    pairs += 1.0;
                    if data.scores()[i] > data.scores()[j] {
                        wins += 1.0;
                    } else if data.scores()[i] == data.scores()[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// Exhaustive threshold enumeration: for each positive, the precision at
    /// the threshold equal to its score (ties included).
    pub fn auprc_thresholds(data: &ScoredLabels) -> f64 {
        let mut sum = 0.0;
        let mut pos = 0.0;
        for i in 0..data.len() {
            if data.labels()[i] != 1 {
                continue;
            }
            pos += 1.0;
            let t = data.scores()[i];
            let mut tp = 0.0;
            let mut all = 0.0;
            for j in 0..data.len() {
                if data.scores()[j] >= t {
                    all += 1.0;
                    if data.labels()[j] == 1 {
                        tp += 1.0;
                    }
                }
            }
            sum += tp / all;
        }
        sum / pos
    }
}
