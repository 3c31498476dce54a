//! `demix`: command-line driver for the debiasing pipeline.
//!
//! Stages are separate subcommands wired together through files, so any
//! stage can be re-run or swapped out. Exit codes: 0 success, 2 bad
//! config/usage, 3 missing upstream artifact, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use demix_core::config::{RunManifest, SplitSummary, MANIFEST_SCHEMA_VERSION};
use demix_core::pipeline::{run_ablation, run_identification, AblationGrid};
use demix_core::plot::write_run_plots;
use demix_core::report::{write_report, ReportRow};
use demix_core::split::split_quality;
use demix_core::{
    evaluate, load_bundle, save_bundle, train_debiased, ArchConfig, BiasSplit, Error as CoreError,
    ExperimentConfig, GeneratorConfig, IdentificationConfig, ModelTriplet, TrainingConfig,
};

#[derive(Parser)]
#[command(
    name = "demix",
    version,
    about = "two-stage unsupervised model debiasing: identify a bias split from \
             prediction dynamics, then train through mixing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with controlled spurious correlation
    Generate(GenerateArgs),
    /// Identify a pseudo bias/unbias split of the train set
    Identify(IdentifyArgs),
    /// Train a (debiased) classifier against a split
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test grid
    Eval(EvalArgs),
    /// Sweep one hyper-parameter axis end to end
    Ablate(AblateArgs),
    /// Aggregate run manifests into CSV + summary
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// generator config JSON
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// overwrite existing output
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct IdentifyArgs {
    /// dataset directory from `demix generate`
    #[arg(long)]
    data: PathBuf,
    /// identification config JSON (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output directory (split.json, history.json)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// dataset directory from `demix generate`
    #[arg(long)]
    data: PathBuf,
    /// split.json from `demix identify`; optional for erm / vanilla mixing
    #[arg(long)]
    split: Option<PathBuf>,
    /// training config JSON (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output directory (checkpoint/, manifest.json, plots/)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// checkpoint directory from `demix train`
    #[arg(long)]
    model: PathBuf,
    /// write metrics JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// experiment config JSON with an `ablation` section
    #[arg(long)]
    config: PathBuf,
    /// overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// output directory (grid.json, runs.csv, summary.json)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// run directories (containing manifest.json), manifest files, or
    /// grid.json files
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Identify(a) => cmd_identify(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_) | CoreError::Shape(_) | CoreError::Json(_) => 2,
                CoreError::MissingArtifact(_)
                | CoreError::MissingGroundTruth
                | CoreError::Persistence { .. }
                | CoreError::Io(_) => 3,
                CoreError::NonFinite(_)
                | CoreError::Diverged { .. }
                | CoreError::TargetAccuracyNotReached { .. }
                | CoreError::DegenerateSplit(_) => 4,
            };
        }
    }
    2
}

/// Refuse to clobber existing output unless `--force`.
fn claim_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(CoreError::Config(format!(
                "output {} already exists; pass --force to overwrite",
                path.display()
            ))
            .into());
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        } else {
            fs::remove_file(path)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        anyhow::Error::new(CoreError::MissingArtifact(format!(
            "{what} at {}: {e}",
            path.display()
        )))
    })?;
    let value: T = serde_json::from_slice(&bytes)
        .map_err(|e| anyhow::Error::new(CoreError::Config(format!("{what}: {e}"))))?;
    Ok(value)
}

fn require_artifact(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CoreError::MissingArtifact(format!(
            "{what} at {} (run `demix {hint}` first)",
            path.display()
        ))
        .into())
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg: GeneratorConfig = read_json(&a.config, "generator config")?;
    cfg.validate()?;
    claim_output(&a.out, a.force)?;
    let bundle = demix_core::generate_synthetic_biased(&cfg, a.seed)?;
    save_bundle(&bundle, &a.out)?;
    if bundle.empty_unbias_warning {
        eprintln!("warning: some classes have no bias-conflicting samples (rho = 1)");
    }
    println!(
        "wrote {} train / {} test samples to {}",
        bundle.train.len(),
        bundle.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_identify(a: IdentifyArgs) -> Result<()> {
    require_artifact(&a.data.join("manifest.json"), "dataset", "generate")?;
    let cfg: IdentificationConfig = match &a.config {
        Some(p) => read_json(p, "identification config")?,
        None => IdentificationConfig::default(),
    };
    cfg.validate()?;
    claim_output(&a.out, a.force)?;
    let bundle = load_bundle(&a.data)?;
    let arch = ArchConfig::desk_scale(bundle.feature_dim(), bundle.num_classes);
    let outcome = run_identification(&bundle, &cfg, &arch, a.seed)?;
    fs::create_dir_all(&a.out)?;
    outcome.split.save(&a.out.join("split.json"))?;
    if let Some(h) = &outcome.history {
        h.save(&a.out.join("history.json"))?;
    }
    let quality = bundle
        .ground_truth()
        .and_then(|gt| split_quality(&outcome.split, &gt).ok());
    println!(
        "split ({}): {} pseudo-biased / {} pseudo-unbiased{}",
        outcome.split.method,
        outcome.split.bias_indices.len(),
        outcome.split.unbias_indices.len(),
        quality
            .map(|q| format!(", F1 vs ground truth {:.3}", q.f1))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_artifact(&a.data.join("manifest.json"), "dataset", "generate")?;
    let cfg: TrainingConfig = match &a.config {
        Some(p) => read_json(p, "training config")?,
        None => TrainingConfig::default(),
    };
    cfg.validate()?;
    let split = match &a.split {
        Some(p) => {
            require_artifact(p, "bias split", "identify")?;
            Some(BiasSplit::load(p)?)
        }
        None => None,
    };
    claim_output(&a.out, a.force)?;

    let started = Instant::now();
    let bundle = load_bundle(&a.data)?;
    if let Some(s) = &split {
        s.validate(bundle.train.len())?;
    }
    let arch = ArchConfig::desk_scale(bundle.feature_dim(), bundle.num_classes);
    let mut model = ModelTriplet::new(arch, a.seed);
    let outcome = train_debiased(&mut model, &bundle, split.as_ref(), &cfg, a.seed)?;
    let final_metrics = evaluate(&model, &bundle)?;

    let split_summary = split.as_ref().map(|s| SplitSummary {
        method: s.method,
        n_bias: s.bias_indices.len(),
        n_unbias: s.unbias_indices.len(),
        quality: bundle
            .ground_truth()
            .and_then(|gt| split_quality(s, &gt).ok()),
    });
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        run_id: format!("{}-seed{}", cfg.method, a.seed),
        seed: a.seed,
        method: cfg.method.to_string(),
        config: serde_json::to_value(&cfg)?,
        split: split_summary,
        epochs: outcome.epochs,
        final_metrics,
        ranking_histogram: None,
        correlation_per_epoch: None,
        identification_train_acc: None,
        fallback_vanilla: outcome.fallback_vanilla,
        warnings: outcome.warnings.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };

    fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("checkpoint"))?;
    fs::write(
        a.out.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    write_run_plots(&manifest, &a.out.join("plots"))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "trained {} for {} epochs: acc_all {:.4}{}",
        manifest.method,
        manifest.epochs.len(),
        manifest.final_metrics.acc_all,
        manifest
            .final_metrics
            .acc_unbiased
            .map(|v| format!(", bias-conflicting {v:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_artifact(&a.data.join("manifest.json"), "dataset", "generate")?;
    require_artifact(&a.model.join("checkpoint.json"), "checkpoint", "train")?;
    let bundle = load_bundle(&a.data)?;
    let model = ModelTriplet::load(&a.model)?;
    let metrics = evaluate(&model, &bundle)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    match &a.out {
        Some(p) => {
            claim_output(p, a.force)?;
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, json)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(&a.config, "experiment config")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    claim_output(&a.out, a.force)?;
    let grid = run_ablation(&cfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("grid.json"), serde_json::to_vec_pretty(&grid)?)?;
    let rows: Vec<ReportRow> = grid
        .runs
        .iter()
        .filter_map(|r| {
            r.manifest.as_ref().map(|m| ReportRow {
                manifest: m,
                axis: Some(r.axis.as_str()),
                value: Some(&r.value),
            })
        })
        .collect();
    let failed = grid.runs.iter().filter(|r| r.error.is_some()).count();
    if rows.is_empty() {
        return Err(CoreError::Config(format!(
            "every ablation cell failed; first error: {}",
            grid.runs
                .first()
                .and_then(|r| r.error.clone())
                .unwrap_or_default()
        ))
        .into());
    }
    write_report(&rows, failed, &a.out)?;
    for r in &grid.runs {
        if let Some(e) = &r.error {
            eprintln!("warning: {} = {} failed: {e}", r.axis, r.value);
        }
    }
    println!(
        "swept {} over {} values ({} ok, {failed} failed) into {}",
        grid.axis,
        grid.runs.len(),
        grid.runs.len() - failed,
        a.out.display()
    );
    Ok(())
}

fn load_manifests(input: &[PathBuf]) -> Result<(Vec<RunManifest>, Vec<AblationGrid>)> {
    let mut manifests = Vec::new();
    let mut grids = Vec::new();
    for path in input {
        let file = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.clone()
        };
        require_artifact(&file, "run manifest", "train")?;
        if file.file_name().and_then(|n| n.to_str()) == Some("grid.json") {
            grids.push(read_json::<AblationGrid>(&file, "ablation grid")?);
        } else {
            manifests.push(read_json::<RunManifest>(&file, "run manifest")?);
        }
    }
    Ok((manifests, grids))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let (manifests, grids) = load_manifests(&a.input)?;
    claim_output(&a.out, a.force)?;
    let mut rows: Vec<ReportRow> = manifests
        .iter()
        .map(|m| ReportRow {
            manifest: m,
            axis: None,
            value: None,
        })
        .collect();
    let mut failed = 0usize;
    for grid in &grids {
        for run in &grid.runs {
            match &run.manifest {
                Some(m) => rows.push(ReportRow {
                    manifest: m,
                    axis: Some(run.axis.as_str()),
                    value: Some(&run.value),
                }),
                None => failed += 1,
            }
        }
    }
    write_report(&rows, failed, &a.out)
        .context("writing report")?;
    println!(
        "reported {} runs ({failed} failed) into {}",
        rows.len(),
        a.out.display()
    );
    Ok(())
}
