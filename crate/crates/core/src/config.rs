//! Experiment configuration and run manifests.
//!
//! Every field has a serde default, so deserializing a sparse user config
//! yields a fully resolved one; serializing it back records every default
//! explicitly in the manifest.

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::eval::GroupAccuracies;
use crate::models::ArchConfig;
use crate::split::{SplitMethod, SplitQuality};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    Erm,
    SMix,
    LMix,
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMethod::Erm => "erm",
            TrainMethod::SMix => "s-mix",
            TrainMethod::LMix => "l-mix",
        })
    }
}

/// Which pools feed the two mixing streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixStrategy {
    BiasUnbias,
    BiasBias,
    UnbiasUnbias,
    Vanilla,
    None,
}

impl std::fmt::Display for MixStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixStrategy::BiasUnbias => "bias-unbias",
            MixStrategy::BiasBias => "bias-bias",
            MixStrategy::UnbiasUnbias => "unbias-unbias",
            MixStrategy::Vanilla => "vanilla",
            MixStrategy::None => "none",
        })
    }
}

fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    256
}
fn default_zeta() -> f64 {
    10.0
}
fn default_omega() -> f64 {
    1e-3
}
fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_method() -> TrainMethod {
    TrainMethod::LMix
}
fn default_strategy() -> MixStrategy {
    MixStrategy::BiasUnbias
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_method")]
    pub method: TrainMethod,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// s-mix regularizer weight
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// l-mix mean-matching regularizer weight
    #[serde(default = "default_omega")]
    pub omega: f64,
    /// fixed Beta parameters for s-mix
    #[serde(default = "default_one")]
    pub alpha: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    /// weighted-ERM coefficient; defaults to |bias split| / N
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_strategy")]
    pub strategy: MixStrategy,
    /// disable to make the parameter network cooperate instead of opposing
    #[serde(default = "default_true")]
    pub grl_enabled: bool,
    /// literal single-update variant: the reversal also covers the
    /// regularizer gradient
    #[serde(default)]
    pub reg_through_grl: bool,
    /// drop the weighted-ERM terms from the s-mix loss (test hook)
    #[serde(default = "default_true")]
    pub include_werm: bool,
    /// freeze the parameter network to alpha = beta = 1 (test hook)
    #[serde(default)]
    pub freeze_uniform: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if self.zeta < 0.0 || self.omega < 0.0 {
            return Err(Error::Config("zeta and omega must be non-negative".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("gamma must be in (0, 1), got {g}")));
            }
        }
        Ok(())
    }
}

fn default_id_method() -> SplitMethod {
    SplitMethod::Ph
}
fn default_gamma() -> f64 {
    0.85
}
fn default_m() -> usize {
    5
}
fn default_k() -> usize {
    20
}
fn default_max_epochs() -> usize {
    60
}
fn default_fraction() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationConfig {
    #[serde(default = "default_id_method")]
    pub method: SplitMethod,
    /// SP target train accuracy
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// PH weight-refresh period
    #[serde(default = "default_m")]
    pub m: usize,
    /// PH total epochs
    #[serde(default = "default_k")]
    pub k_epochs: usize,
    /// SP epoch cap
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// bias fraction for the random baseline
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// apply the weight-update formula without the monotone cap
    #[serde(default)]
    pub literal_weight_formula: bool,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl IdentificationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "identification gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.m == 0 || self.k_epochs == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "m, k_epochs and max_epochs must be positive".into(),
            ));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config("fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub generate: Option<GeneratorConfig>,
    /// path to a saved bundle directory; mutually exclusive with `generate`
    #[serde(default)]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub axis: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub identification: IdentificationConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    /// network shapes; derived from the bundle when absent
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub ablation: Option<AblationSection>,
}

pub const ABLATION_AXES: &[&str] = &["gamma", "m", "zeta", "omega", "strategy", "split_method"];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.generate, &self.dataset.path) {
            (Some(g), None) => g.validate()?,
            (None, Some(_)) => {}
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset: set either `generate` or `path`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "dataset: one of `generate` or `path` is required".into(),
                ))
            }
        }
        self.identification.validate()?;
        self.training.validate()?;
        if let Some(ab) = &self.ablation {
            if ab.values.is_empty() {
                return Err(Error::Config("ablation.values must be non-empty".into()));
            }
            if !ABLATION_AXES.contains(&ab.axis.as_str()) {
                return Err(Error::Config(format!(
                    "unknown ablation axis `{}` (expected one of {:?})",
                    ab.axis, ABLATION_AXES
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// --- run manifests ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub acc_all: f64,
    pub acc_unbiased: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub method: SplitMethod,
    pub n_bias: usize,
    pub n_unbias: usize,
    pub quality: Option<SplitQuality>,
}

/// Seeded experiment record: enough to reproduce and report a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    /// fully resolved configuration snapshot
    pub config: serde_json::Value,
    pub split: Option<SplitSummary>,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: GroupAccuracies,
    #[serde(default)]
    pub ranking_histogram: Option<Vec<usize>>,
    #[serde(default)]
    pub correlation_per_epoch: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub identification_train_acc: Option<Vec<f64>>,
    #[serde(default)]
    pub fallback_vanilla: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    /// Everything except wall time, for determinism comparisons.
    pub fn deterministic_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    }
}
