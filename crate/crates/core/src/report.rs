//! Aggregate run manifests into a flat CSV and a summary JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunManifest;
use crate::error::{Error, Result};

/// Fixed column order so downstream diffs are stable.
pub const CSV_COLUMNS: &[&str] = &[
    "run_id",
    "axis",
    "value",
    "seed",
    "method",
    "acc_all",
    "acc_unbiased",
    "acc_biased",
    "split_f1",
    "wall_time_s",
];

/// One manifest with optional ablation coordinates.
#[derive(Debug, Clone)]
pub struct ReportRow<'a> {
    pub manifest: &'a RunManifest,
    pub axis: Option<&'a str>,
    pub value: Option<&'a serde_json::Value>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("no run manifests to report".into()));
    }
    let mut out = String::new();
    out.push_str(&CSV_COLUMNS.join(","));
    out.push('\n');
    for row in rows {
        let m = row.manifest;
        let f1 = m.split.as_ref().and_then(|s| s.quality.map(|q| q.f1));
        let value = row
            .value
            .map(|v| v.to_string().trim_matches('"').to_string())
            .unwrap_or_default();
        let fields = [
            m.run_id.clone(),
            row.axis.unwrap_or_default().to_string(),
            value,
            m.seed.to_string(),
            m.method.clone(),
            format!("{:.6}", m.final_metrics.acc_all),
            fmt_opt(m.final_metrics.acc_unbiased),
            fmt_opt(m.final_metrics.acc_biased),
            fmt_opt(f1),
            format!("{:.3}", m.wall_time_s),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Per-method aggregate statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_acc_all: f64,
    pub mean_acc_unbiased: Option<f64>,
    pub mean_split_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub total_runs: usize,
    pub failed_runs: usize,
    pub methods: Vec<MethodSummary>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

pub fn summarize(rows: &[ReportRow], failed: usize) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Config("no run manifests to report".into()));
    }
    let mut methods: Vec<String> = rows.iter().map(|r| r.manifest.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let summaries = methods
        .into_iter()
        .map(|method| {
            let ms: Vec<&RunManifest> = rows
                .iter()
                .filter(|r| r.manifest.method == method)
                .map(|r| r.manifest)
                .collect();
            let acc_all: Vec<f64> = ms.iter().map(|m| m.final_metrics.acc_all).collect();
            let acc_unb: Vec<f64> = ms
                .iter()
                .filter_map(|m| m.final_metrics.acc_unbiased)
                .collect();
            let f1s: Vec<f64> = ms
                .iter()
                .filter_map(|m| m.split.as_ref().and_then(|s| s.quality.map(|q| q.f1)))
                .collect();
            MethodSummary {
                method,
                runs: ms.len(),
                mean_acc_all: mean(&acc_all).unwrap_or(0.0),
                mean_acc_unbiased: mean(&acc_unb),
                mean_split_f1: mean(&f1s),
            }
        })
        .collect();
    Ok(Summary {
        total_runs: rows.len(),
        failed_runs: failed,
        methods: summaries,
    })
}

pub fn write_report(rows: &[ReportRow], failed: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("runs.csv"), to_csv(rows)?)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&summarize(rows, failed)?)?,
    )?;
    Ok(())
}
