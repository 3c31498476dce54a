//! Group-wise accuracy evaluation on the (class, domain) grid.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{batch_features, DatasetBundle, Sample};
use crate::error::Result;
use crate::models::ModelTriplet;

/// Accuracies over the whole test set and its bias-aligned / conflicting
/// subsets. For synthetic data a test sample is "unbiased" when its domain
/// differs from its class's privileged domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracies {
    pub acc_all: f64,
    pub acc_unbiased: Option<f64>,
    pub acc_biased: Option<f64>,
    /// per (class, domain) cell accuracy; None for empty cells
    pub per_cell: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

fn predict_all(model: &ModelTriplet, samples: &[Sample]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(1024) {
        let x = batch_features(samples, chunk);
        preds.extend(model.predict(&x)?);
    }
    Ok(preds)
}

/// Evaluate a model on the bundle's test set.
pub fn evaluate(model: &ModelTriplet, bundle: &DatasetBundle) -> Result<GroupAccuracies> {
    let preds = predict_all(model, &bundle.test)?;
    evaluate_predictions(&preds, bundle)
}

/// Group accuracies from precomputed predictions; split out so tests can
/// drive it with synthetic predictors.
pub fn evaluate_predictions(preds: &[usize], bundle: &DatasetBundle) -> Result<GroupAccuracies> {
    let c = bundle.num_classes;
    let d = bundle.num_domains;
    let has_domains = bundle.test.iter().all(|s| s.bias_domain.is_some());

    let mut correct_cells = vec![vec![0usize; d]; c];
    let mut counts = vec![vec![0usize; d]; c];
    let mut correct_total = 0usize;
    let mut aligned_correct = 0usize;
    let mut aligned_total = 0usize;
    let mut conflicting_correct = 0usize;
    let mut conflicting_total = 0usize;

    for (s, &p) in bundle.test.iter().zip(preds.iter()) {
        let hit = p == s.class_label;
        if hit {
            correct_total += 1;
        }
        if let Some(dom) = s.bias_domain {
            counts[s.class_label][dom] += 1;
            if hit {
                correct_cells[s.class_label][dom] += 1;
            }
            if dom == bundle.privileged_domain(s.class_label) {
                aligned_total += 1;
                if hit {
                    aligned_correct += 1;
                }
            } else {
                conflicting_total += 1;
                if hit {
                    conflicting_correct += 1;
                }
            }
        }
    }

    let per_cell = correct_cells
        .iter()
        .zip(counts.iter())
        .map(|(cr, cn)| {
            cr.iter()
                .zip(cn.iter())
                .map(|(&r, &n)| if n == 0 { None } else { Some(r as f64 / n as f64) })
                .collect()
        })
        .collect();

    Ok(GroupAccuracies {
        acc_all: correct_total as f64 / bundle.test.len().max(1) as f64,
        acc_unbiased: if has_domains && conflicting_total > 0 {
            Some(conflicting_correct as f64 / conflicting_total as f64)
        } else {
            None
        },
        acc_biased: if has_domains && aligned_total > 0 {
            Some(aligned_correct as f64 / aligned_total as f64)
        } else {
            None
        },
        per_cell,
        counts,
    })
}

impl GroupAccuracies {
    /// Count-weighted mean of per-cell accuracies; equals `acc_all` exactly
    /// when every test sample carries a domain label.
    pub fn acc_all_from_cells(&self) -> Option<f64> {
        let mut correct = 0.0;
        let mut total = 0usize;
        for (row_acc, row_cnt) in self.per_cell.iter().zip(self.counts.iter()) {
            for (acc, &n) in row_acc.iter().zip(row_cnt.iter()) {
                if n > 0 {
                    correct += acc.as_ref()? * n as f64;
                    total += n;
                }
            }
        }
        if total == 0 {
            None
        } else {
            Some(correct / total as f64)
        }
    }
}

/// Logits as softmax probabilities (inference utility).
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}
