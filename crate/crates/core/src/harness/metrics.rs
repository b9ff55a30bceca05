//! Window-level classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Label;

/// One scored window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub window_index: usize,
    /// PD-class probability.
    pub score: f64,
    pub predicted: Label,
    pub truth: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    /// Unweighted means over HC and PD.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present in the truth.
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, macro precision/recall/F1 and rank AUC. A class that is never
/// predicted (or never present) contributes 0 to the macro averages.
pub fn metrics(preds: &[Prediction]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics", "no predictions"));
    }
    let mut per_class = Vec::with_capacity(2);
    for class in [Label::Hc, Label::Pd] {
        let tp = preds
            .iter()
            .filter(|p| p.predicted == class && p.truth == class)
            .count();
        let fp = preds
            .iter()
            .filter(|p| p.predicted == class && p.truth != class)
            .count();
        let fn_ = preds
            .iter()
            .filter(|p| p.predicted != class && p.truth == class)
            .count();
        let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        per_class.push((p, r, f));
    }
    let correct = preds.iter().filter(|p| p.predicted == p.truth).count();
    let scores: Vec<(f64, bool)> = preds
        .iter()
        .map(|p| (p.score, p.truth == Label::Pd))
        .collect();
    Ok(Metrics {
        n: preds.len(),
        accuracy: ratio(correct, preds.len()),
        precision: (per_class[0].0 + per_class[1].0) / 2.0,
        recall: (per_class[0].1 + per_class[1].1) / 2.0,
        f1: (per_class[0].2 + per_class[1].2) / 2.0,
        auc: auc(&scores),
    })
}

/// Mann-Whitney AUC of `(score, is_positive)` pairs with midranks for ties.
pub fn auc(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scored[idx[j + 1]].0 == scored[idx[i]].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| scored[k].1).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
