use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]`: cells of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of cells whose true class this is.
    pub support: u64,
    /// No cell was predicted as this class; precision reported as 0.
    pub precision_undefined: bool,
    /// No cell of this class was evaluated; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassMetric>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

pub fn default_class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class_{i}")).collect()
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::shape("predictions vs labels", &[truth.len()], &[pred.len()]));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: p.max(t),
                n_classes,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: default_class_names(n_classes),
    })
}

impl ConfusionMatrix {
    pub fn with_class_names(mut self, names: &[String]) -> Result<Self> {
        if names.len() != self.n_classes() {
            return Err(Error::shape("class names", &[self.n_classes()], &[names.len()]));
        }
        self.class_names = names.to_vec();
        Ok(self)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

/// `2PR/(P+R)`, or 0 when `P+R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassMetrics {
    let c = cm.n_classes();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[k][k] as f64;
        let row: u64 = cm.counts[k].iter().sum();
        let col: u64 = (0..c).map(|t| cm.counts[t][k]).sum();
        let precision = if col > 0 { tp / col as f64 } else { 0.0 };
        let recall = if row > 0 { tp / row as f64 } else { 0.0 };
        per_class.push(ClassMetric {
            class: cm.class_names[k].clone(),
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: row,
            precision_undefined: col == 0,
            recall_undefined: row == 0,
        });
    }
    let mean = |f: fn(&ClassMetric) -> f64| {
        if c == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / c as f64
        }
    };
    let total = cm.total();
    ClassMetrics {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: if total > 0 { cm.trace() as f64 / total as f64 } else { 0.0 },
        per_class,
    }
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    Ok(precision_recall_f1(&confusion_matrix(pred, truth, n_classes)?).macro_f1)
}
