//! End-to-end orchestration: dataset -> identification -> training ->
//! evaluation, plus one-axis ablation sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{
    ExperimentConfig, IdentificationConfig, RunManifest, SplitSummary, MANIFEST_SCHEMA_VERSION,
};
use crate::data::{generate_synthetic_biased, load_bundle, DatasetBundle};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::identify::{
    bias_correlation, split_by_prediction_history, split_by_single_prediction, ErmOpts,
    PredictionHistory,
};
use crate::models::{ArchConfig, ModelTriplet};
use crate::split::{split_quality, BiasSplit, SplitMethod};
use crate::train::train_debiased;

/// Materialize the configured dataset (generate or load).
pub fn resolve_bundle(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    match (&cfg.dataset.generate, &cfg.dataset.path) {
        (Some(g), None) => generate_synthetic_biased(g, cfg.seed),
        (None, Some(p)) => load_bundle(std::path::Path::new(p)),
        _ => Err(Error::Config(
            "dataset: exactly one of `generate` or `path` is required".into(),
        )),
    }
}

pub fn resolve_arch(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> ArchConfig {
    cfg.arch
        .clone()
        .unwrap_or_else(|| ArchConfig::desk_scale(bundle.feature_dim(), bundle.num_classes))
}

/// Stage 1 output: the split plus the prediction history when the method
/// produces one.
pub struct IdentificationOutcome {
    pub split: BiasSplit,
    pub history: Option<PredictionHistory>,
}

pub fn run_identification(
    bundle: &DatasetBundle,
    cfg: &IdentificationConfig,
    arch: &ArchConfig,
    seed: u64,
) -> Result<IdentificationOutcome> {
    cfg.validate()?;
    let opts = ErmOpts {
        epochs: 0,
        lr: cfg.lr,
        batch: cfg.batch,
        seed,
    };
    match cfg.method {
        SplitMethod::Sp => {
            let mut model = ModelTriplet::new(arch.clone(), seed);
            let (split, history) =
                split_by_single_prediction(bundle, cfg.gamma, cfg.max_epochs, &opts, &mut model)?;
            Ok(IdentificationOutcome {
                split,
                history: Some(history),
            })
        }
        SplitMethod::Ph => {
            let mut model = ModelTriplet::new(arch.clone(), seed);
            let (split, history) = split_by_prediction_history(
                bundle,
                cfg.m,
                cfg.k_epochs,
                &opts,
                &mut model,
                cfg.literal_weight_formula,
            )?;
            Ok(IdentificationOutcome {
                split,
                history: Some(history),
            })
        }
        SplitMethod::Oracle => {
            let gt = bundle.ground_truth().ok_or(Error::MissingGroundTruth)?;
            Ok(IdentificationOutcome {
                split: BiasSplit::from_ground_truth(&gt),
                history: None,
            })
        }
        SplitMethod::Random => Ok(IdentificationOutcome {
            split: BiasSplit::random(bundle.train.len(), cfg.fraction, seed)?,
            history: None,
        }),
    }
}

fn split_summary(bundle: &DatasetBundle, split: &BiasSplit) -> SplitSummary {
    let quality = bundle
        .ground_truth()
        .and_then(|gt| split_quality(split, &gt).ok());
    SplitSummary {
        method: split.method,
        n_bias: split.bias_indices.len(),
        n_unbias: split.unbias_indices.len(),
        quality,
    }
}

/// Short stable id from the resolved config and seed.
fn run_id(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let blob = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&blob);
    let digest = h.finalize();
    let hex: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("{}-seed{}-{hex}", cfg.training.method, cfg.seed)
}

/// Full single run. Returns the trained model with its manifest so callers
/// can persist either.
pub fn run_full(cfg: &ExperimentConfig) -> Result<(ModelTriplet, RunManifest)> {
    cfg.validate()?;
    let started = Instant::now();
    let bundle = resolve_bundle(cfg)?;
    let arch = resolve_arch(cfg, &bundle);

    let mut warnings = Vec::new();
    if bundle.empty_unbias_warning {
        warnings.push("dataset has classes with no bias-conflicting samples".into());
    }

    let needs_split = cfg.training.method != crate::config::TrainMethod::Erm
        && cfg.training.strategy != crate::config::MixStrategy::Vanilla;
    let ident = if needs_split {
        Some(run_identification(&bundle, &cfg.identification, &arch, cfg.seed)?)
    } else {
        None
    };

    let mut model = ModelTriplet::new(arch, cfg.seed);
    let outcome = train_debiased(
        &mut model,
        &bundle,
        ident.as_ref().map(|i| &i.split),
        &cfg.training,
        cfg.seed,
    )?;
    warnings.extend(outcome.warnings.iter().cloned());

    let final_metrics = evaluate(&model, &bundle)?;
    let (ranking_histogram, correlation_per_epoch, identification_train_acc) = match ident
        .as_ref()
        .and_then(|i| i.history.as_ref())
    {
        Some(h) => (
            Some(h.ranking_histogram()),
            bundle.ground_truth().map(|gt| bias_correlation(h, &gt)),
            Some(h.epoch_accuracies()),
        ),
        None => (None, None, None),
    };

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        run_id: run_id(cfg),
        seed: cfg.seed,
        method: cfg.training.method.to_string(),
        config: serde_json::to_value(cfg)?,
        split: ident.as_ref().map(|i| split_summary(&bundle, &i.split)),
        epochs: outcome.epochs,
        final_metrics,
        ranking_histogram,
        correlation_per_epoch,
        identification_train_acc,
        fallback_vanilla: outcome.fallback_vanilla,
        warnings,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((model, manifest))
}

/// One cell of an ablation sweep; failed runs carry the error instead of
/// aborting the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub axis: String,
    pub value: serde_json::Value,
    pub manifest: Option<RunManifest>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: String,
    pub seed: u64,
    pub runs: Vec<AblationRun>,
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: &str, value: &serde_json::Value) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("ablation axis {axis}: expected {what}, got {value}"));
    match axis {
        "gamma" => {
            let v = value.as_f64().ok_or_else(|| bad("a number"))?;
            cfg.identification.gamma = v;
            cfg.training.gamma = None;
        }
        "m" => {
            let v = value.as_u64().ok_or_else(|| bad("a positive integer"))?;
            cfg.identification.m = v as usize;
        }
        "zeta" => {
            cfg.training.zeta = value.as_f64().ok_or_else(|| bad("a number"))?;
        }
        "omega" => {
            cfg.training.omega = value.as_f64().ok_or_else(|| bad("a number"))?;
        }
        "strategy" => {
            cfg.training.strategy = serde_json::from_value(value.clone())
                .map_err(|_| bad("a mix strategy name"))?;
        }
        "split_method" => {
            cfg.identification.method = serde_json::from_value(value.clone())
                .map_err(|_| bad("a split method name"))?;
        }
        other => {
            return Err(Error::Config(format!("unknown ablation axis `{other}`")));
        }
    }
    Ok(())
}

/// Sweep one axis, sharing the base seed across cells; each cell revalidates
/// its resolved config and failures are recorded, not fatal.
pub fn run_ablation(base: &ExperimentConfig) -> Result<AblationGrid> {
    let section = base
        .ablation
        .clone()
        .ok_or_else(|| Error::Config("config has no ablation section".into()))?;
    base.validate()?;
    let mut runs = Vec::with_capacity(section.values.len());
    for value in &section.values {
        let mut cfg = base.clone();
        cfg.ablation = None;
        let cell = apply_axis(&mut cfg, &section.axis, value)
            .and_then(|()| cfg.validate().map(|()| cfg.clone()))
            .and_then(|cfg| run_full(&cfg));
        match cell {
            Ok((_, manifest)) => runs.push(AblationRun {
                axis: section.axis.clone(),
                value: value.clone(),
                manifest: Some(manifest),
                error: None,
            }),
            Err(e) => runs.push(AblationRun {
                axis: section.axis.clone(),
                value: value.clone(),
                manifest: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(AblationGrid {
        axis: section.axis,
        seed: base.seed,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationSection, DatasetSection, TrainMethod};
    use crate::data::GeneratorConfig;

    fn tiny_config(method: TrainMethod) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: 0,
            dataset: DatasetSection {
                generate: Some(GeneratorConfig {
                    num_classes: 2,
                    num_domains: None,
                    n_per_class: 30,
                    rho: 0.9,
                    corruption_strength: 1.0,
                    image_size: 4,
                    class_signal: 0.5,
                    noise_sigma: 0.4,
                    test_per_cell: Some(4),
                }),
                path: None,
            },
            ..Default::default()
        };
        cfg.training.method = method;
        cfg.training.epochs = 2;
        cfg.training.batch = 16;
        cfg.identification.method = SplitMethod::Random;
        cfg.identification.batch = 16;
        cfg.arch = Some(ArchConfig {
            input_dim: 48,
            num_classes: 2,
            feature_hidden: vec![8],
            feature_dim: 6,
            classifier_hidden: vec![],
            betanet_hidden: vec![4],
        });
        cfg
    }

    #[test]
    fn oracle_identification_matches_ground_truth() {
        let cfg = tiny_config(TrainMethod::Erm);
        let bundle = resolve_bundle(&cfg).unwrap();
        let arch = resolve_arch(&cfg, &bundle);
        let mut icfg = cfg.identification.clone();
        icfg.method = SplitMethod::Oracle;
        let out = run_identification(&bundle, &icfg, &arch, 0).unwrap();
        let gt = bundle.ground_truth().unwrap();
        let q = split_quality(&out.split, &gt).unwrap();
        assert_eq!(q.f1, 1.0);
        assert!(out.history.is_none());
    }

    #[test]
    fn run_full_produces_complete_manifest() {
        let cfg = tiny_config(TrainMethod::SMix);
        let (_, manifest) = run_full(&cfg).unwrap();
        assert_eq!(manifest.schema_version, MANIFEST_SCHEMA_VERSION);
        assert_eq!(manifest.epochs.len(), 2);
        assert_eq!(manifest.method, "s-mix");
        let s = manifest.split.as_ref().unwrap();
        assert_eq!(s.n_bias + s.n_unbias, 60);
        assert!(s.quality.is_some());
        assert!(manifest.wall_time_s > 0.0);
        // resolved config snapshot carries the defaults
        assert_eq!(manifest.config["training"]["zeta"], 10.0);
    }

    #[test]
    fn manifests_are_deterministic_modulo_wall_time() {
        let cfg = tiny_config(TrainMethod::LMix);
        let (m1, a) = run_full(&cfg).unwrap();
        let (m2, b) = run_full(&cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(a.deterministic_view(), b.deterministic_view());
    }

    #[test]
    fn erm_runs_skip_identification() {
        let cfg = tiny_config(TrainMethod::Erm);
        let (_, manifest) = run_full(&cfg).unwrap();
        assert!(manifest.split.is_none());
        assert!(manifest.ranking_histogram.is_none());
    }

    #[test]
    fn ph_manifest_carries_histogram_and_correlation() {
        let mut cfg = tiny_config(TrainMethod::SMix);
        cfg.identification.method = SplitMethod::Ph;
        cfg.identification.k_epochs = 4;
        cfg.identification.m = 2;
        let (_, manifest) = run_full(&cfg).unwrap();
        let hist = manifest.ranking_histogram.as_ref().unwrap();
        assert_eq!(hist.len(), 5); // K+1 bins
        assert_eq!(hist.iter().sum::<usize>(), 60);
        assert_eq!(manifest.correlation_per_epoch.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn ablation_grid_shares_seed_and_records_failures() {
        let mut cfg = tiny_config(TrainMethod::SMix);
        cfg.ablation = Some(AblationSection {
            axis: "zeta".into(),
            values: vec![
                serde_json::json!(0.0),
                serde_json::json!(1.0),
                serde_json::json!(-3.0), // invalid: recorded as a failure
            ],
        });
        let grid = run_ablation(&cfg).unwrap();
        assert_eq!(grid.runs.len(), 3);
        assert!(grid.runs[0].manifest.is_some());
        assert!(grid.runs[1].manifest.is_some());
        assert!(grid.runs[2].manifest.is_none());
        assert!(grid.runs[2].error.is_some());
        for run in &grid.runs[..2] {
            assert_eq!(run.manifest.as_ref().unwrap().seed, cfg.seed);
        }
    }

    #[test]
    fn strategy_axis_parses_names() {
        let mut cfg = tiny_config(TrainMethod::SMix);
        cfg.ablation = Some(AblationSection {
            axis: "strategy".into(),
            values: vec![serde_json::json!("bias-bias"), serde_json::json!("nope")],
        });
        let grid = run_ablation(&cfg).unwrap();
        assert!(grid.runs[0].manifest.is_some());
        assert!(grid.runs[1].error.is_some());
    }
}
