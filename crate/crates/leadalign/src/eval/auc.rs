//! Macro ROC-AUC via the Mann–Whitney rank statistic.
//!
//! Per-class AUC = P(score+ > score-) + 0.5 * P(score+ = score-), computed
//! from midranks in O(n log n). Sums of midranks are exact in f64 (integers
//! and halves), so the result equals the O(n^2) pairwise count bit-for-bit.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AucReport {
    pub per_class_auc: BTreeMap<String, f64>,
    /// Unweighted mean over classes with at least one positive and one
    /// negative; degenerate classes are excluded and listed.
    pub macro_auc: f64,
    pub degenerate_classes: Vec<String>,
}

/// AUC for one class from raw scores and binary labels.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro AUC over a multi-label score/label matrix (`[n x K]`).
pub fn macro_auc(
    scores: &Array2<f64>,
    labels: &Array2<u8>,
    class_names: &[String],
) -> Result<AucReport> {
    if scores.dim() != labels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    if scores.ncols() != class_names.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score columns vs {} class names",
            scores.ncols(),
            class_names.len()
        )));
    }
    if scores.nrows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            actual: scores.nrows(),
        });
    }
    let mut per_class_auc = BTreeMap::new();
    let mut degenerate = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        let col: Vec<f64> = scores.column(k).to_vec();
        let lab: Vec<bool> = labels.column(k).iter().map(|&v| v != 0).collect();
        match binary_auc(&col, &lab) {
            Some(auc) => {
                per_class_auc.insert(name.clone(), auc);
            }
            None => {
                log::warn!("class {name:?} is all-positive or all-negative; excluded from macro AUC");
                degenerate.push(name.clone());
            }
        }
    }
    if per_class_auc.is_empty() {
        return Err(Error::InvalidValue {
            key: "labels".into(),
            message: "every class is degenerate (no positives or no negatives)".into(),
        });
    }
    let macro_auc = per_class_auc.values().sum::<f64>() / per_class_auc.len() as f64;
    Ok(AucReport {
        per_class_auc,
        macro_auc,
        degenerate_classes: degenerate,
    })
}
