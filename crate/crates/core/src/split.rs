//! Bias-split types, baselines, diagnostics and persistence.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::GroundTruthBiasLabels;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const SPLIT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    Sp,
    Ph,
    Oracle,
    Random,
}

impl std::fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitMethod::Sp => "sp",
            SplitMethod::Ph => "ph",
            SplitMethod::Oracle => "oracle",
            SplitMethod::Random => "random",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
}

/// Disjoint, exhaustive partition of train indices into pseudo-biased and
/// pseudo-unbiased subsets, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSplit {
    pub schema_version: u32,
    pub method: SplitMethod,
    pub params: SplitParams,
    pub k_epochs: usize,
    pub bias_indices: Vec<usize>,
    pub unbias_indices: Vec<usize>,
}

impl BiasSplit {
    pub fn new(
        method: SplitMethod,
        params: SplitParams,
        k_epochs: usize,
        bias_indices: Vec<usize>,
        unbias_indices: Vec<usize>,
    ) -> Self {
        Self {
            schema_version: SPLIT_SCHEMA_VERSION,
            method,
            params,
            k_epochs,
            bias_indices,
            unbias_indices,
        }
    }

    pub fn n(&self) -> usize {
        self.bias_indices.len() + self.unbias_indices.len()
    }

    /// Checks the partition is disjoint and exhaustive over [0, n).
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n() != n {
            return Err(Error::DegenerateSplit(format!(
                "split covers {} indices, train set has {n}",
                self.n()
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.bias_indices.iter().chain(self.unbias_indices.iter()) {
            if i >= n || seen[i] {
                return Err(Error::DegenerateSplit(format!(
                    "index {i} out of range or duplicated"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Oracle split copying the ground-truth flags exactly.
    pub fn from_ground_truth(gt: &GroundTruthBiasLabels) -> Self {
        let mut bias = Vec::new();
        let mut unbias = Vec::new();
        for (i, &aligned) in gt.aligned.iter().enumerate() {
            if aligned {
                bias.push(i);
            } else {
                unbias.push(i);
            }
        }
        Self::new(SplitMethod::Oracle, SplitParams::default(), 0, bias, unbias)
    }

    /// Random baseline with round(fraction * n) indices in the bias subset.
    pub fn random(n: usize, bias_fraction: f64, seed: u64) -> Result<Self> {
        if !(bias_fraction > 0.0 && bias_fraction < 1.0) {
            return Err(Error::Config(format!(
                "bias_fraction must be in (0, 1), got {bias_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, Stream::Split));
        let n_bias = (bias_fraction * n as f64).round() as usize;
        let mut bias = idx[..n_bias].to_vec();
        let mut unbias = idx[n_bias..].to_vec();
        bias.sort_unstable();
        unbias.sort_unstable();
        Ok(Self::new(
            SplitMethod::Random,
            SplitParams {
                fraction: Some(bias_fraction),
                ..Default::default()
            },
            0,
            bias,
            unbias,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Persistence {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let split: BiasSplit = serde_json::from_slice(&bytes)?;
        if split.schema_version != SPLIT_SCHEMA_VERSION {
            return Err(Error::Persistence {
                path: path.display().to_string(),
                detail: format!("unsupported split schema {}", split.schema_version),
            });
        }
        Ok(split)
    }
}

/// Binary precision/recall/F1 with "unbiased" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn split_quality(split: &BiasSplit, gt: &GroundTruthBiasLabels) -> Result<SplitQuality> {
    split.validate(gt.aligned.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &i in &split.unbias_indices {
        if gt.aligned[i] {
            fp += 1;
        } else {
            tp += 1;
        }
    }
    let fn_ = gt.aligned.iter().filter(|&&a| !a).count() - tp;
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
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SplitQuality {
        precision,
        recall,
        f1,
    })
}

/// Expected F1 of a uniformly random split with `n_pred` predicted-unbiased
/// indices against `n_true` truly unbiased ones; exact because the F1
/// denominator is fixed given the sizes (hypergeometric overlap).
pub fn analytic_random_f1(n: usize, n_pred: usize, n_true: usize) -> f64 {
    if n_pred + n_true == 0 {
        return 0.0;
    }
    2.0 * (n_pred as f64) * (n_true as f64) / (n as f64 * (n_pred + n_true) as f64)
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}
