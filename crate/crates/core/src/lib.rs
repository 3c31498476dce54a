//! Unsupervised debiasing via prediction dynamics and learned feature mixing.
//!
//! The library covers the full pipeline on synthetic data with controlled
//! bias: dataset generation, bias identification from what a plain classifier
//! learns early, mixing-based debiased training (fixed or learned Beta
//! mixing weights), group-wise evaluation, and reporting.

pub mod autodiff;
pub mod betadist;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod identify;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod rng;
pub mod split;
pub mod train;

pub use config::{ExperimentConfig, IdentificationConfig, RunManifest, TrainMethod, TrainingConfig};
pub use data::{generate_synthetic_biased, load_bundle, save_bundle, DatasetBundle, GeneratorConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, GroupAccuracies};
pub use models::{ArchConfig, ModelTriplet};
pub use pipeline::{run_ablation, run_full, run_identification};
pub use split::{BiasSplit, SplitMethod, SplitQuality};
pub use train::{train_debiased, DebiasOutcome};
