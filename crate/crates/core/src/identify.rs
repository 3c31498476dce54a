//! Stage 1: bias identification from prediction dynamics.
//!
//! Both split rules train a plain classifier by (weighted) ERM and read off
//! which samples it fits. SP stops at a target train accuracy and splits on
//! a single forward pass; PH tracks the full N x K correctness history,
//! damping the weights of persistently hard samples every M epochs, and
//! finally labels the never-correct samples as unbiased.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batch_features, batch_labels, DatasetBundle, GroundTruthBiasLabels, Sample};
use crate::error::{Error, Result};
use crate::models::ModelTriplet;
use crate::optim::{clip_global_norm, Adam, GRAD_CLIP_NORM};
use crate::rng::{stream_rng, Stream};
use crate::split::{pearson, BiasSplit, SplitMethod, SplitParams};

pub const HISTORY_SCHEMA_VERSION: u32 = 1;

/// N x K binary correctness matrix, stored column-per-epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHistory {
    pub n: usize,
    /// columns[t][i] = sample i correct at epoch t
    pub columns: Vec<Vec<bool>>,
}

impl PredictionHistory {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            columns: Vec::new(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.columns.len()
    }

    pub fn push_epoch(&mut self, correct: Vec<bool>) {
        assert_eq!(correct.len(), self.n);
        self.columns.push(correct);
    }

    /// Ranking vector: per-sample count of correct epochs.
    pub fn ranking(&self) -> Vec<u32> {
        let mut r = vec![0u32; self.n];
        for col in &self.columns {
            for (i, &c) in col.iter().enumerate() {
                if c {
                    r[i] += 1;
                }
            }
        }
        r
    }

    /// Histogram of the ranking vector over K+1 bins {0, ..., K}, so every
    /// attainable count has its own bin.
    pub fn ranking_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.epochs() + 1];
        for v in self.ranking() {
            h[v as usize] += 1;
        }
        h
    }

    /// Per-epoch train accuracy (column means).
    pub fn epoch_accuracies(&self) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c.iter().filter(|&&v| v).count() as f64 / self.n as f64)
            .collect()
    }

    /// Sums of the last `m` columns, element-wise.
    pub fn window_sums(&self, m: usize) -> Vec<u32> {
        let start = self.columns.len().saturating_sub(m);
        let mut s = vec![0u32; self.n];
        for col in &self.columns[start..] {
            for (i, &c) in col.iter().enumerate() {
                if c {
                    s[i] += 1;
                }
            }
        }
        s
    }

    /// Packed bitmatrix + JSON header; `path` is the header file, the bits
    /// live next to it with extension `.bits`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut bits = vec![0u8; (self.n * self.epochs() + 7) / 8];
        for (t, col) in self.columns.iter().enumerate() {
            for (i, &c) in col.iter().enumerate() {
                if c {
                    let bit = t * self.n + i;
                    bits[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        let header = HistoryHeader {
            schema_version: HISTORY_SCHEMA_VERSION,
            n: self.n,
            k: self.epochs(),
        };
        fs::write(path, serde_json::to_vec_pretty(&header)?)?;
        fs::write(path.with_extension("bits"), &bits)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: HistoryHeader = serde_json::from_slice(&fs::read(path).map_err(|e| {
            Error::Persistence {
                path: path.display().to_string(),
                detail: e.to_string(),
            }
        })?)?;
        if header.schema_version != HISTORY_SCHEMA_VERSION {
            return Err(Error::Persistence {
                path: path.display().to_string(),
                detail: format!("unsupported history schema {}", header.schema_version),
            });
        }
        let bits = fs::read(path.with_extension("bits"))?;
        if bits.len() != (header.n * header.k + 7) / 8 {
            return Err(Error::Persistence {
                path: path.display().to_string(),
                detail: "bitmatrix size mismatch".into(),
            });
        }
        let mut columns = Vec::with_capacity(header.k);
        for t in 0..header.k {
            let col = (0..header.n)
                .map(|i| {
                    let bit = t * header.n + i;
                    bits[bit / 8] & (1 << (bit % 8)) != 0
                })
                .collect();
            columns.push(col);
        }
        Ok(Self {
            n: header.n,
            columns,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryHeader {
    schema_version: u32,
    n: usize,
    k: usize,
}

/// Per-sample loss weights in [0, 1], all ones initially.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub c: Vec<f64>,
}

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        Self { c: vec![1.0; n] }
    }
}

/// Weight refresh from a window of correctness sums:
/// `c_new = c_old - (1 - (sum + 1)/M)`, clipped to [0, 1].
///
/// The raw formula can increase a weight when the window is fully correct;
/// the surrounding prose requires monotone non-increasing weights, so by
/// default the new value is additionally capped at the old one.
/// `literal_formula` disables that cap.
pub fn update_weight_vector(
    c_old: &WeightVector,
    window_sums: &[u32],
    m: usize,
    literal_formula: bool,
) -> WeightVector {
    assert_eq!(c_old.c.len(), window_sums.len());
    let c = c_old
        .c
        .iter()
        .zip(window_sums.iter())
        .map(|(&c, &s)| {
            let raw = c - (1.0 - (s as f64 + 1.0) / m as f64);
            let clipped = raw.clamp(0.0, 1.0);
            if literal_formula {
                clipped
            } else {
                clipped.min(c)
            }
        })
        .collect();
    WeightVector { c }
}

/// Training options for the identification stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErmOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ErmOpts {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch: 256,
            seed: 0,
        }
    }
}

/// One (optionally weighted) ERM epoch over the train set; returns mean loss.
pub fn run_erm_epoch(
    model: &mut ModelTriplet,
    train: &[Sample],
    num_classes: usize,
    weights: Option<&[f64]>,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
    batch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch) {
        let x = batch_features(train, chunk);
        let y = batch_labels(train, chunk, num_classes);
        let w = weights.map(|w| Array1::from_iter(chunk.iter().map(|&i| w[i])));

        let mut g = Graph::new();
        let xn = g.constant(x);
        let (feat, fids) = model.feature.mlp.forward_graph(&mut g, xn);
        let (logits, cids) = model.classifier.mlp.forward_graph(&mut g, feat);
        let tn = g.constant(y);
        let loss = g.cross_entropy(logits, tn, w);
        let loss_val = g.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                detail: format!("batch loss {loss_val}"),
            });
        }
        g.backward(loss);
        let mut grads: Vec<Option<ndarray::Array2<f64>>> = fids
            .iter()
            .chain(cids.iter())
            .map(|&id| g.grad(id).cloned())
            .collect();
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        let mut params: Vec<&mut ndarray::Array2<f64>> = model
            .feature
            .mlp
            .params_mut()
            .into_iter()
            .chain(model.classifier.mlp.params_mut())
            .collect();
        adam.step(&mut params, &grads);
        total += loss_val;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Full forward pass over the train set; per-sample correctness.
pub fn full_pass_correct(model: &ModelTriplet, train: &[Sample]) -> Result<Vec<bool>> {
    let mut correct = Vec::with_capacity(train.len());
    let indices: Vec<usize> = (0..train.len()).collect();
    for chunk in indices.chunks(1024) {
        let x = batch_features(train, chunk);
        let preds = model.predict(&x)?;
        for (&i, p) in chunk.iter().zip(preds.iter()) {
            correct.push(*p == train[i].class_label);
        }
    }
    Ok(correct)
}

/// Outcome of an ERM training run with per-epoch prediction logging.
#[derive(Debug, Clone)]
pub struct ErmOutcome {
    pub history: PredictionHistory,
    pub train_losses: Vec<f64>,
}

/// Plain (optionally weighted) ERM for `opts.epochs` epochs with per-epoch
/// correctness logging.
pub fn train_erm(
    model: &mut ModelTriplet,
    bundle: &DatasetBundle,
    opts: &ErmOpts,
    weights: Option<&[f64]>,
) -> Result<ErmOutcome> {
    if opts.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let mut adam = Adam::new(opts.lr);
    let mut rng = stream_rng(opts.seed, Stream::Batching);
    let mut history = PredictionHistory::new(bundle.train.len());
    let mut losses = Vec::new();
    for epoch in 0..opts.epochs {
        let loss = run_erm_epoch(
            model,
            &bundle.train,
            bundle.num_classes,
            weights,
            &mut adam,
            &mut rng,
            opts.batch,
        )
        .map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
            other => other,
        })?;
        losses.push(loss);
        history.push_epoch(full_pass_correct(model, &bundle.train)?);
    }
    Ok(ErmOutcome {
        history,
        train_losses: losses,
    })
}

/// SP rule: train until train accuracy reaches `gamma` (checked once per
/// epoch), then split on that same forward pass: correct samples go to the
/// bias subset.
pub fn split_by_single_prediction(
    bundle: &DatasetBundle,
    gamma: f64,
    max_epochs: usize,
    opts: &ErmOpts,
    model: &mut ModelTriplet,
) -> Result<(BiasSplit, PredictionHistory)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let mut adam = Adam::new(opts.lr);
    let mut rng = stream_rng(opts.seed, Stream::Batching);
    let mut history = PredictionHistory::new(bundle.train.len());
    let mut best = 0.0f64;
    for epoch in 0..max_epochs {
        run_erm_epoch(
            model,
            &bundle.train,
            bundle.num_classes,
            None,
            &mut adam,
            &mut rng,
            opts.batch,
        )
        .map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
            other => other,
        })?;
        let correct = full_pass_correct(model, &bundle.train)?;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
        history.push_epoch(correct.clone());
        best = best.max(acc);
        if acc >= gamma {
            let mut bias = Vec::new();
            let mut unbias = Vec::new();
            for (i, &c) in correct.iter().enumerate() {
                if c {
                    bias.push(i);
                } else {
                    unbias.push(i);
                }
            }
            let split = BiasSplit::new(
                SplitMethod::Sp,
                SplitParams {
                    gamma: Some(gamma),
                    ..Default::default()
                },
                epoch + 1,
                bias,
                unbias,
            );
            return Ok((split, history));
        }
    }
    Err(Error::TargetAccuracyNotReached {
        target: gamma,
        epochs: max_epochs,
        best,
    })
}

/// PH rule: weighted ERM for `k` epochs, refreshing the weight vector every
/// `m` epochs from the window correctness sums; the final split assigns the
/// never-correct samples (leftmost histogram bin) to the unbias subset.
pub fn split_by_prediction_history(
    bundle: &DatasetBundle,
    m: usize,
    k: usize,
    opts: &ErmOpts,
    model: &mut ModelTriplet,
    literal_formula: bool,
) -> Result<(BiasSplit, PredictionHistory)> {
    if m == 0 {
        return Err(Error::Config("M must be >= 1".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let mut adam = Adam::new(opts.lr);
    let mut rng = stream_rng(opts.seed, Stream::Batching);
    let mut history = PredictionHistory::new(bundle.train.len());
    let mut c = WeightVector::ones(bundle.train.len());
    for epoch in 0..k {
        run_erm_epoch(
            model,
            &bundle.train,
            bundle.num_classes,
            Some(&c.c),
            &mut adam,
            &mut rng,
            opts.batch,
        )
        .map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
            other => other,
        })?;
        history.push_epoch(full_pass_correct(model, &bundle.train)?);
        if (epoch + 1) % m == 0 {
            c = update_weight_vector(&c, &history.window_sums(m), m, literal_formula);
        }
    }
    let ranking = history.ranking();
    let mut bias = Vec::new();
    let mut unbias = Vec::new();
    for (i, &r) in ranking.iter().enumerate() {
        if r == 0 {
            unbias.push(i);
        } else {
            bias.push(i);
        }
    }
    if bias.is_empty() {
        return Err(Error::DegenerateSplit(
            "every sample is in the leftmost bin; the model looks untrained, increase K".into(),
        ));
    }
    let split = BiasSplit::new(
        SplitMethod::Ph,
        SplitParams {
            m: Some(m),
            ..Default::default()
        },
        k,
        bias,
        unbias,
    );
    Ok((split, history))
}

/// Per-epoch Pearson correlation between correctness and the ground-truth
/// aligned flags. `None` entries mark zero-variance epochs.
pub fn bias_correlation(
    history: &PredictionHistory,
    gt: &GroundTruthBiasLabels,
) -> Vec<Option<f64>> {
    let flags: Vec<f64> = gt.aligned.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    history
        .columns
        .iter()
        .map(|col| {
            let s: Vec<f64> = col.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
            pearson(&s, &flags)
        })
        .collect()
}
