//! Classification metrics and F1-maximizing decision-threshold calibration.
//!
//! Scores are generic: LR and LSTM produce probabilities, the SVM a signed
//! margin. AUC is computed from the rank statistic with tied scores
//! contributing one half, which is equivalent to integrating the ROC curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued per-sample scores with their binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        assert_eq!(scores.len(), labels.len());
        Self { scores, labels }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Metrics of one model on one dataset at a fixed threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auc_roc: f64,
    /// Counts indexed `[true class][predicted class]`, class 0 = vacant.
    pub confusion: [[u64; 2]; 2],
    pub confusion_row_norm: [[f64; 2]; 2],
    pub threshold: f64,
    /// Set when a 0/0 metric convention or a single-class AUC was applied.
    pub degenerate: bool,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "precision,recall,f1,accuracy,auc_roc,tn,fp,fn,tp,threshold";

    /// One appendable CSV row matching [`Self::CSV_HEADER`].
    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.9}",
            self.precision,
            self.recall,
            self.f1,
            self.accuracy,
            self.auc_roc,
            self.confusion[0][0],
            self.confusion[0][1],
            self.confusion[1][0],
            self.confusion[1][1],
            self.threshold
        )
    }
}

fn f1_at(set: &ScoredSet, tau: f64) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&s, &y) in set.scores.iter().zip(&set.labels) {
        let pred = s >= tau;
        match (y, pred) {
            (1, true) => tp += 1,
            (0, true) => fp += 1,
            (1, false) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

/// Linear-interpolated percentile of a sorted slice, `p` in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi.min(n - 1)] * w
}

/// Pick the decision threshold maximizing positive-class F1 on validation
/// scores.
///
/// Candidates are `n_grid` evenly spaced percentiles of the scores between
/// `lo_pct` and `hi_pct`, plus the minimum score as a floor candidate (so the
/// degenerate all-positive optimum stays reachable). Ties break toward the
/// larger threshold.
pub fn select_threshold(val: &ScoredSet, lo_pct: f64, hi_pct: f64, n_grid: usize) -> Result<f64> {
    if !val.labels.contains(&1) {
        return Err(Error::NoPositives);
    }
    let mut sorted = val.scores.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut candidates = Vec::with_capacity(n_grid + 1);
    candidates.push(sorted[0]);
    for k in 0..n_grid {
        let p = if n_grid == 1 {
            lo_pct
        } else {
            lo_pct + (hi_pct - lo_pct) * k as f64 / (n_grid - 1) as f64
        };
        candidates.push(percentile(&sorted, p));
    }
    let scored: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|&tau| (tau, f1_at(val, tau)))
        .collect();
    let mut best = scored[0];
    for &(tau, f1) in &scored[1..] {
        if f1 > best.1 || (f1 == best.1 && tau > best.0) {
            best = (tau, f1);
        }
    }
    Ok(best.0)
}

/// Conventional grid for [`select_threshold`]: percentiles 1–99 in steps of 0.5.
pub fn select_threshold_default(val: &ScoredSet) -> Result<f64> {
    select_threshold(val, 1.0, 99.0, 197)
}

/// Rank-statistic ROC AUC with tied scores contributing one half.
///
/// Returns `(auc, degenerate)`; a single-class set yields 0.5 and the flag.
pub fn roc_auc(set: &ScoredSet) -> (f64, bool) {
    let n = set.len();
    let n_pos = set.labels.iter().filter(|&&y| y == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return (0.5, true);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0; // average of 1-based ranks i+1..=j
        for k in i..j {
            rank[order[k]] = avg;
        }
        i = j;
    }
    let rank_sum_pos: f64 = (0..n).filter(|&i| set.labels[i] == 1).map(|i| rank[i]).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    (u / (n_pos as f64 * n_neg as f64), false)
}

/// Row-normalize a 2×2 confusion matrix; an all-zero row maps to zeros.
pub fn confusion_row_normalize(confusion: &[[u64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        let total = (confusion[r][0] + confusion[r][1]) as f64;
        if total > 0.0 {
            out[r][0] = confusion[r][0] as f64 / total;
            out[r][1] = confusion[r][1] as f64 / total;
        }
    }
    out
}

/// Full metric suite at threshold `tau`: predict occupied iff score ≥ τ.
pub fn compute_metrics(test: &ScoredSet, tau: f64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut confusion = [[0u64; 2]; 2];
    for (&s, &y) in test.scores.iter().zip(&test.labels) {
        let pred = usize::from(s >= tau);
        confusion[y as usize][pred] += 1;
    }
    let tp = confusion[1][1] as f64;
    let fp = confusion[0][1] as f64;
    let fn_ = confusion[1][0] as f64;
    let tn = confusion[0][0] as f64;
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let accuracy = (tp + tn) / test.len() as f64;
    let (auc_roc, auc_degenerate) = roc_auc(test);
    Ok(EvalReport {
        precision,
        recall,
        f1,
        accuracy,
        auc_roc,
        confusion,
        confusion_row_norm: confusion_row_normalize(&confusion),
        threshold: tau,
        degenerate: degenerate || auc_degenerate,
    })
}
