use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::evidential::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Positive-class AUC for two classes, one-vs-rest macro AUC otherwise.
    /// Absent when the labels contain a single class.
    pub auc: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub n_samples: usize,
}

/// Scores one prediction per item. `scores[i]` is a probability vector
/// (softmax output or Dirichlet mean) over `K` classes.
pub fn compute_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} score rows but {} labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(invalid!("no predictions to evaluate"));
    }
    let k = scores[0].len();
    if k < 2 || scores.iter().any(|s| s.len() != k) {
        return Err(invalid!("score rows must all have the same length >= 2"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid!("label {bad} out of range for {k} classes"));
    }

    let mut confusion = vec![vec![0u64; k]; k];
    for (s, &y) in scores.iter().zip(labels) {
        confusion[y][argmax(s)] += 1;
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / labels.len() as f64;

    Ok(MetricsReport {
        accuracy,
        macro_f1: macro_f1(&confusion),
        auc: auc(scores, labels),
        confusion,
        n_samples: labels.len(),
    })
}

/// Unweighted mean of per-class F1. Classes that never occur in either the
/// labels or the predictions are left out of the mean.
pub fn macro_f1(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..k {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..k).map(|r| confusion[r][c]).sum::<u64>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            continue;
        }
        total += 2.0 * tp as f64 / denom as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn auc(scores: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let k = scores[0].len();
    if k == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return binary_auc(&s, &pos);
    }
    let per_class: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&s, &pos)
        })
        .collect();
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

/// Mann-Whitney AUC with midranks for tied scores. `None` when either class
/// is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the average rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}
