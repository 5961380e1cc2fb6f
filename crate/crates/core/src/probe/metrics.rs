//! Classification metrics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Rank-based ROC AUC: the fraction of (positive, negative) pairs ordered
/// correctly, with tied scores counting one half.
pub fn roc_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc_binary", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // 1-based average ranks; a tie block of length L starting at rank r gets r + (L−1)/2
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let block_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg * block_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Macro one-vs-rest AUC over classes present in the labels.
    pub auc: f64,
    pub accuracy: f64,
    /// Macro F1. A class with no true samples and no predictions is left
    /// out of the mean.
    pub f1: f64,
    /// Row-normalized confusion matrix, rows = true class. Rows of classes
    /// absent from the labels are all zero.
    pub confusion: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub per_class_auc: Vec<Option<f64>>,
    pub n: usize,
}

pub fn macro_metrics<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<Metrics> {
    let (n, c) = (probs.rows(), probs.cols());
    if probs.ndim() != 2 || n != labels.len() {
        return Err(Error::shape("macro_metrics", probs.shape(), &[labels.len()]));
    }
    if c < 2 {
        return Err(Error::Contract("metrics need at least two classes".into()));
    }
    if n == 0 {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {l} out of range for {c} classes")));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| probs.row(r).iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut counts = vec![vec![0usize; c]; c];
    for (row, &y) in rows.iter().zip(labels) {
        counts[y][argmax(row)] += 1;
    }
    let correct: usize = (0..c).map(|k| counts[k][k]).sum();
    let confusion = counts
        .iter()
        .map(|r| {
            let total: usize = r.iter().sum();
            r.iter()
                .map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 })
                .collect()
        })
        .collect();

    let mut f1s = Vec::new();
    for (k, row) in counts.iter().enumerate() {
        let tp = row[k];
        let fn_: usize = row.iter().sum::<usize>() - tp;
        let fp: usize = (0..c).map(|r| counts[r][k]).sum::<usize>() - tp;
        if tp + fp + fn_ > 0 {
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
    }

    let mut per_class_auc = vec![None; c];
    if c == 2 {
        // both one-vs-rest AUCs equal the positive-class AUC
        let scores: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        if let Ok(a) = roc_auc_binary(&scores, &y) {
            per_class_auc = vec![Some(a), Some(a)];
        }
    } else {
        for (k, slot) in per_class_auc.iter_mut().enumerate() {
            let scores: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            *slot = roc_auc_binary(&scores, &y).ok();
        }
    }
    for (k, a) in per_class_auc.iter().enumerate() {
        if a.is_none() {
            warn!("class {k} has no positives or no negatives; excluded from macro AUC");
        }
    }
    let present: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    let auc = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Metrics {
        auc,
        accuracy: correct as f64 / n as f64,
        f1: f1s.iter().sum::<f64>() / f1s.len().max(1) as f64,
        confusion,
        counts,
        per_class_auc,
        n,
    })
}
