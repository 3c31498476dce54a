//! Stage 2: debiased training by mixing across the pseudo-bias split.
//!
//! Two objectives share the two-stream pair sampler:
//!
//! * s-mix: `(1-gamma) CE(bias) + gamma CE(unbias) + zeta CE(mixed)` with
//!   mixing weights drawn from a fixed Beta(alpha, beta).
//! * l-mix: `CE(mixed) + omega * Reg`, where a per-pair parameter network
//!   predicts (alpha, beta) from stop-gradded features, the draw is made
//!   differentiable by implicit reparameterization, and a gradient reversal
//!   between the draw and the mixed input trains the parameter network
//!   adversarially against the classifier. `Reg` pulls the per-pair Beta mean
//!   toward the pseudo-unbiased fraction and is read off before the reversal.
//!
//! All three components update from a single backward pass per batch.

use ndarray::Array2;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::betadist::sample_beta;
use crate::config::{EpochMetrics, MixStrategy, TrainMethod, TrainingConfig};
use crate::data::{two_stream_sampler, DatasetBundle, PairBatch};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::identify::{full_pass_correct, run_erm_epoch};
use crate::models::ModelTriplet;
use crate::optim::{clip_global_norm, Adam, GRAD_CLIP_NORM};
use crate::rng::{stream_rng, Stream};
use crate::split::BiasSplit;

/// Convex combination of two batches with per-row weights `lam` (B x 1).
/// Exact at the endpoints: `lam = 1` returns `x1`, `lam = 0` returns `x2`.
pub fn mix_pair(x1: &Array2<f64>, x2: &Array2<f64>, lam: &Array2<f64>) -> Result<Array2<f64>> {
    if x1.dim() != x2.dim() {
        return Err(Error::Shape(format!(
            "mix_pair: {:?} vs {:?}",
            x1.dim(),
            x2.dim()
        )));
    }
    if lam.dim() != (x1.nrows(), 1) {
        return Err(Error::Shape(format!(
            "mix_pair: lambda must be {} x 1, got {:?}",
            x1.nrows(),
            lam.dim()
        )));
    }
    if lam.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(Error::Config(
            "mix_pair: lambda outside [0, 1]".into(),
        ));
    }
    // same op sequence as the graph path (mul_col, mul_col, add) so the two
    // routes agree bitwise
    let om = lam.mapv(|v| -1.0 * v + 1.0);
    let a = x1 * lam;
    let b = x2 * &om;
    Ok(&a + &b)
}

/// B independent draws from a fixed Beta(alpha, beta) as a B x 1 column.
pub fn sample_lambda_batch(
    alpha: f64,
    beta: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let mut lam = Array2::zeros((n, 1));
    for v in lam.iter_mut() {
        *v = sample_beta(alpha, beta, rng)?;
    }
    Ok(lam)
}

/// Mean-matching regularizer `mean((alpha/(alpha+beta) - target)^2)`;
/// zero exactly when every pair's Beta mean equals the target.
pub fn beta_mean_regularizer(alpha: &Array2<f64>, beta: &Array2<f64>, target: f64) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in alpha.iter().zip(beta.iter()) {
        let d = a / (a + b) - target;
        acc += d * d;
    }
    acc / alpha.len().max(1) as f64
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub werm: f64,
    pub mix: f64,
    pub reg: f64,
}

/// Sum gradients of the same parameter registered in several graph passes.
fn summed_grads(g: &Graph, regs: &[&[NodeId]], count: usize) -> Vec<Option<Array2<f64>>> {
    (0..count)
        .map(|i| {
            let mut acc: Option<Array2<f64>> = None;
            for ids in regs {
                if let Some(gr) = g.grad(ids[i]) {
                    match &mut acc {
                        Some(a) => *a += gr,
                        slot => *slot = Some(gr.clone()),
                    }
                }
            }
            acc
        })
        .collect()
}

fn check_finite_loss(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch: 0,
            detail: format!("{what} loss {v}"),
        })
    }
}

/// One s-mix step: weighted ERM terms on the two streams plus a mixed term
/// with fixed-Beta weights. The optimizer covers feature + classifier
/// parameters in `params()` order.
pub fn s_mix_step(
    model: &mut ModelTriplet,
    batch: &PairBatch,
    cfg: &TrainingConfig,
    gamma: f64,
    adam: &mut Adam,
    mix_rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let skip_mix = cfg.strategy == MixStrategy::None || cfg.zeta == 0.0;
    if skip_mix && !cfg.include_werm {
        return Err(Error::Config(
            "s-mix with no mixing term and no weighted ERM terms is empty".into(),
        ));
    }

    let mut g = Graph::new();
    let mut feat_regs: Vec<Vec<NodeId>> = Vec::new();
    let mut cls_regs: Vec<Vec<NodeId>> = Vec::new();
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut werm = 0.0;
    let mut mix = 0.0;

    if cfg.include_werm {
        for (x, y, w) in [
            (&batch.x1, &batch.y1, 1.0 - gamma),
            (&batch.x2, &batch.y2, gamma),
        ] {
            let xn = g.constant(x.clone());
            let (feat, fids) = model.feature.mlp.forward_graph(&mut g, xn);
            let (logits, cids) = model.classifier.mlp.forward_graph(&mut g, feat);
            let yn = g.constant(y.clone());
            let ce = g.cross_entropy(logits, yn, None);
            werm += w * g.scalar(ce);
            feat_regs.push(fids);
            cls_regs.push(cids);
            terms.push((ce, w));
        }
    }

    if !skip_mix {
        let lam = sample_lambda_batch(cfg.alpha, cfg.beta, batch.len(), mix_rng)?;
        let xm = mix_pair(&batch.x1, &batch.x2, &lam)?;
        let ym = mix_pair(&batch.y1, &batch.y2, &lam)?;
        let xn = g.constant(xm);
        let (feat, fids) = model.feature.mlp.forward_graph(&mut g, xn);
        let (logits, cids) = model.classifier.mlp.forward_graph(&mut g, feat);
        let yn = g.constant(ym);
        let ce = g.cross_entropy(logits, yn, None);
        mix = g.scalar(ce);
        feat_regs.push(fids);
        cls_regs.push(cids);
        terms.push((ce, cfg.zeta));
    }

    let mut total = g.affine(terms[0].0, terms[0].1, 0.0);
    for &(t, w) in &terms[1..] {
        let scaled = g.affine(t, w, 0.0);
        total = g.add(total, scaled);
    }
    let total_val = g.scalar(total);
    check_finite_loss(total_val, "s-mix")?;
    g.backward(total);

    let n_feat = model.feature.mlp.params().len();
    let n_cls = model.classifier.mlp.params().len();
    let freg: Vec<&[NodeId]> = feat_regs.iter().map(|v| v.as_slice()).collect();
    let creg: Vec<&[NodeId]> = cls_regs.iter().map(|v| v.as_slice()).collect();
    let mut grads = summed_grads(&g, &freg, n_feat);
    grads.extend(summed_grads(&g, &creg, n_cls));
    clip_global_norm(&mut grads, GRAD_CLIP_NORM);

    let mut params: Vec<&mut Array2<f64>> = model
        .feature
        .mlp
        .params_mut()
        .into_iter()
        .chain(model.classifier.mlp.params_mut())
        .collect();
    adam.step(&mut params, &grads);

    Ok(StepLosses {
        total: total_val,
        werm,
        mix,
        reg: 0.0,
    })
}

/// One l-mix step: the parameter network reads the stop-gradded feature pair,
/// the Beta draw is differentiable through its parameters, and the reversal
/// sits between the draw and the mixed input so a single backward pass
/// descends the classifier and ascends the parameter network on the same CE.
/// The optimizer covers feature + classifier + parameter-network parameters.
pub fn l_mix_step(
    model: &mut ModelTriplet,
    batch: &PairBatch,
    cfg: &TrainingConfig,
    unbias_fraction: f64,
    adam: &mut Adam,
    mix_rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let b = batch.len();
    let mut g = Graph::new();
    let x1n = g.constant(batch.x1.clone());
    let x2n = g.constant(batch.x2.clone());
    let y1n = g.constant(batch.y1.clone());
    let y2n = g.constant(batch.y2.clone());

    let mut feat_regs: Vec<Vec<NodeId>> = Vec::new();
    let (alpha, beta, bids) = if cfg.freeze_uniform {
        let an = g.constant(Array2::from_elem((b, 1), 1.0));
        let bn = g.constant(Array2::from_elem((b, 1), 1.0));
        (an, bn, Vec::new())
    } else {
        let (f1, ids1) = model.feature.mlp.forward_graph(&mut g, x1n);
        let (f2, ids2) = model.feature.mlp.forward_graph(&mut g, x2n);
        feat_regs.push(ids1);
        feat_regs.push(ids2);
        // the parameter network must not backprop into the backbone
        let sg1 = g.stop_grad(f1);
        let sg2 = g.stop_grad(f2);
        let cat = g.concat_cols(sg1, sg2);
        let (an, bn, bids) = model.betanet.forward_graph(&mut g, cat);
        (an, bn, bids)
    };

    let lam = g.beta_sample(alpha, beta, mix_rng)?;
    let lam_ce = if cfg.grl_enabled && !cfg.freeze_uniform {
        g.grl(lam)
    } else {
        lam
    };
    let om = g.affine(lam_ce, -1.0, 1.0);
    let xm_a = g.mul_col(x1n, lam_ce);
    let xm_b = g.mul_col(x2n, om);
    let xm = g.add(xm_a, xm_b);
    let ym_a = g.mul_col(y1n, lam_ce);
    let ym_b = g.mul_col(y2n, om);
    let ym = g.add(ym_a, ym_b);

    let (fm, idsm) = model.feature.mlp.forward_graph(&mut g, xm);
    feat_regs.push(idsm);
    let (logits, cids) = model.classifier.mlp.forward_graph(&mut g, fm);
    let cem = g.cross_entropy(logits, ym, None);
    let mix = g.scalar(cem);

    let mut total = cem;
    let mut reg_val = 0.0;
    if cfg.omega > 0.0 && !cfg.freeze_uniform {
        // regularizer read before (or, in the literal variant, through) the
        // reversal
        let (ra, rb) = if cfg.reg_through_grl && cfg.grl_enabled {
            (g.grl(alpha), g.grl(beta))
        } else {
            (alpha, beta)
        };
        let sum = g.add(ra, rb);
        let mean = g.div_ew(ra, sum);
        let target = g.constant(Array2::from_elem((b, 1), unbias_fraction));
        let diff = g.sub(mean, target);
        let sq = g.mul_ew(diff, diff);
        let reg = g.mean_all(sq);
        reg_val = g.scalar(reg);
        let scaled = g.affine(reg, cfg.omega, 0.0);
        total = g.add(total, scaled);
    }

    let total_val = g.scalar(total);
    check_finite_loss(total_val, "l-mix")?;
    g.backward(total);

    let n_feat = model.feature.mlp.params().len();
    let n_cls = model.classifier.mlp.params().len();
    let n_bet = model.betanet.mlp.params().len();
    let freg: Vec<&[NodeId]> = feat_regs.iter().map(|v| v.as_slice()).collect();
    let mut grads = summed_grads(&g, &freg, n_feat);
    grads.extend(summed_grads(&g, &[cids.as_slice()], n_cls));
    if cfg.freeze_uniform {
        grads.extend((0..n_bet).map(|_| None));
    } else {
        grads.extend(summed_grads(&g, &[bids.as_slice()], n_bet));
    }
    clip_global_norm(&mut grads, GRAD_CLIP_NORM);

    let mut params: Vec<&mut Array2<f64>> = model
        .feature
        .mlp
        .params_mut()
        .into_iter()
        .chain(model.classifier.mlp.params_mut())
        .chain(model.betanet.mlp.params_mut())
        .collect();
    adam.step(&mut params, &grads);

    Ok(StepLosses {
        total: total_val,
        werm: 0.0,
        mix,
        reg: reg_val,
    })
}

/// Result of a debiased training run.
#[derive(Debug, Clone)]
pub struct DebiasOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// resolved weighted-ERM coefficient (s/l-mix runs)
    pub gamma_used: Option<f64>,
    /// true when a degenerate split forced plain ERM
    pub fallback_vanilla: bool,
    pub warnings: Vec<String>,
}

fn strategy_pools(
    strategy: MixStrategy,
    split: Option<&BiasSplit>,
    n: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let all = || (0..n).collect::<Vec<_>>();
    match strategy {
        MixStrategy::Vanilla => Ok((all(), all())),
        MixStrategy::BiasUnbias | MixStrategy::None => {
            let s = split.ok_or_else(|| {
                Error::MissingArtifact("bias split (run identification first)".into())
            })?;
            Ok((s.bias_indices.clone(), s.unbias_indices.clone()))
        }
        MixStrategy::BiasBias => {
            let s = split.ok_or_else(|| {
                Error::MissingArtifact("bias split (run identification first)".into())
            })?;
            Ok((s.bias_indices.clone(), s.bias_indices.clone()))
        }
        MixStrategy::UnbiasUnbias => {
            let s = split.ok_or_else(|| {
                Error::MissingArtifact("bias split (run identification first)".into())
            })?;
            Ok((s.unbias_indices.clone(), s.unbias_indices.clone()))
        }
    }
}

fn epoch_metrics(
    model: &ModelTriplet,
    bundle: &DatasetBundle,
    epoch: usize,
    train_loss: f64,
) -> Result<EpochMetrics> {
    let correct = full_pass_correct(model, &bundle.train)?;
    let train_acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64;
    let ga = evaluate(model, bundle)?;
    Ok(EpochMetrics {
        epoch,
        train_loss,
        train_acc,
        acc_all: ga.acc_all,
        acc_unbiased: ga.acc_unbiased,
    })
}

fn train_plain_erm(
    model: &mut ModelTriplet,
    bundle: &DatasetBundle,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    let mut adam = Adam::new(cfg.lr);
    let mut rng = stream_rng(seed, Stream::Batching);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = run_erm_epoch(
            model,
            &bundle.train,
            bundle.num_classes,
            None,
            &mut adam,
            &mut rng,
            cfg.batch,
        )
        .map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
            other => other,
        })?;
        epochs.push(epoch_metrics(model, bundle, epoch, loss)?);
    }
    Ok(epochs)
}

/// Train with the configured method. Mixing methods need a bias split unless
/// the strategy is `vanilla`; a split with an empty side degrades to plain
/// ERM with a warning instead of failing the run.
pub fn train_debiased(
    model: &mut ModelTriplet,
    bundle: &DatasetBundle,
    split: Option<&BiasSplit>,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<DebiasOutcome> {
    cfg.validate()?;
    let mut warnings = Vec::new();

    if cfg.method == TrainMethod::Erm {
        let epochs = train_plain_erm(model, bundle, cfg, seed)?;
        return Ok(DebiasOutcome {
            epochs,
            gamma_used: None,
            fallback_vanilla: false,
            warnings,
        });
    }

    let n = bundle.train.len();
    let (pool_a, pool_b) = strategy_pools(cfg.strategy, split, n)?;
    if pool_a.is_empty() || pool_b.is_empty() {
        warnings.push(
            "bias split has an empty side; falling back to vanilla training".into(),
        );
        let epochs = train_plain_erm(model, bundle, cfg, seed)?;
        return Ok(DebiasOutcome {
            epochs,
            gamma_used: None,
            fallback_vanilla: true,
            warnings,
        });
    }

    // gamma and the regularizer target default to the split proportions
    let (bias_frac, unbias_frac) = match split {
        Some(s) => {
            let nb = s.bias_indices.len() as f64;
            (nb / n as f64, 1.0 - nb / n as f64)
        }
        None => (0.5, 0.5),
    };
    let gamma = cfg.gamma.unwrap_or(bias_frac);

    let mut adam = Adam::new(cfg.lr);
    let mut batch_master = stream_rng(seed, Stream::Batching);
    let mut mix_rng = stream_rng(seed, Stream::Mixing);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed: u64 = batch_master.gen();
        let sampler = two_stream_sampler(
            &bundle.train,
            bundle.num_classes,
            &pool_a,
            &pool_b,
            cfg.batch,
            stream_rng(epoch_seed, Stream::Batching),
        )?;
        let mut total = 0.0;
        let mut nb = 0usize;
        for pb in sampler {
            let losses = match cfg.method {
                TrainMethod::SMix => {
                    s_mix_step(model, &pb, cfg, gamma, &mut adam, &mut mix_rng)
                }
                TrainMethod::LMix => {
                    l_mix_step(model, &pb, cfg, unbias_frac, &mut adam, &mut mix_rng)
                }
                TrainMethod::Erm => unreachable!(),
            }
            .map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
                other => other,
            })?;
            total += losses.total;
            nb += 1;
        }
        epochs.push(epoch_metrics(model, bundle, epoch, total / nb.max(1) as f64)?)
    }

    Ok(DebiasOutcome {
        epochs,
        gamma_used: Some(gamma),
        fallback_vanilla: false,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::betadist::{beta_cdf, beta_quantile};
    use crate::data::{generate_synthetic_biased, rows_sum_to_one, GeneratorConfig};
    use crate::models::ArchConfig;
    use ndarray::array;

    fn toy_bundle(seed: u64, rho: f64) -> DatasetBundle {
        let cfg = GeneratorConfig {
            num_classes: 2,
            num_domains: None,
            n_per_class: 40,
            rho,
            corruption_strength: 1.0,
            image_size: 4,
            class_signal: 0.5,
            noise_sigma: 0.4,
            test_per_cell: Some(4),
        };
        generate_synthetic_biased(&cfg, seed).unwrap()
    }

    fn toy_model(bundle: &DatasetBundle, seed: u64) -> ModelTriplet {
        let arch = ArchConfig {
            input_dim: bundle.feature_dim(),
            num_classes: bundle.num_classes,
            feature_hidden: vec![8],
            feature_dim: 6,
            classifier_hidden: vec![],
            betanet_hidden: vec![4],
        };
        ModelTriplet::new(arch, seed)
    }

    fn toy_split(bundle: &DatasetBundle) -> BiasSplit {
        BiasSplit::from_ground_truth(&bundle.ground_truth().unwrap())
    }

    #[test]
    fn mix_pair_endpoints_and_midpoint() {
        let x1 = array![[1.0, 2.0], [3.0, 4.0]];
        let x2 = array![[-1.0, 0.5], [7.0, -2.0]];
        let ones = array![[1.0], [1.0]];
        let zeros = array![[0.0], [0.0]];
        let half = array![[0.5], [0.5]];
        assert_eq!(mix_pair(&x1, &x2, &ones).unwrap(), x1);
        assert_eq!(mix_pair(&x1, &x2, &zeros).unwrap(), x2);
        let mid = mix_pair(&x1, &x2, &half).unwrap();
        assert_eq!(mid, array![[0.0, 1.25], [5.0, 1.0]]);
    }

    #[test]
    fn mix_pair_rejects_bad_lambda_and_shapes() {
        let x1 = array![[1.0, 2.0]];
        let x2 = array![[0.0, 0.0]];
        assert!(mix_pair(&x1, &x2, &array![[1.5]]).is_err());
        assert!(mix_pair(&x1, &x2, &array![[-0.1]]).is_err());
        assert!(mix_pair(&x1, &array![[0.0]], &array![[0.5]]).is_err());
        assert!(mix_pair(&x1, &x2, &array![[0.5], [0.5]]).is_err());
    }

    #[test]
    fn mixed_one_hot_targets_keep_row_sums() {
        let y1 = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let y2 = array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let lam = array![[0.3], [0.8], [0.5]];
        let ym = mix_pair(&y1, &y2, &lam).unwrap();
        assert!(rows_sum_to_one(&ym, 1e-12));
    }

    #[test]
    fn regularizer_zero_iff_means_match_target() {
        let alpha = array![[1.0], [2.0]];
        let beta = array![[1.0], [2.0]];
        assert_eq!(beta_mean_regularizer(&alpha, &beta, 0.5), 0.0);
        let r = beta_mean_regularizer(&alpha, &beta, 0.3);
        assert!((r - 0.04).abs() < 1e-12);
        assert!(r > 0.0);
    }

    fn config(method: TrainMethod) -> TrainingConfig {
        TrainingConfig {
            method,
            epochs: 3,
            lr: 1e-3,
            batch: 16,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zeta_zero_reduces_to_weighted_erm_bitwise() {
        let bundle = toy_bundle(0, 0.9);
        let split = toy_split(&bundle);

        let mut with_zeta_zero = toy_model(&bundle, 1);
        let mut cfg = config(TrainMethod::SMix);
        cfg.zeta = 0.0;
        train_debiased(&mut with_zeta_zero, &bundle, Some(&split), &cfg, 5).unwrap();

        let mut no_mix = toy_model(&bundle, 1);
        let mut cfg2 = config(TrainMethod::SMix);
        cfg2.strategy = MixStrategy::None;
        cfg2.zeta = 10.0;
        train_debiased(&mut no_mix, &bundle, Some(&split), &cfg2, 5).unwrap();

        assert_eq!(with_zeta_zero, no_mix);
    }

    /// l-mix with a frozen uniform sampler and no reversal must follow the
    /// exact arithmetic of s-mix restricted to its mixing term.
    #[test]
    fn frozen_uniform_l_mix_matches_s_mix_mixing_term() {
        let bundle = toy_bundle(1, 0.9);
        let split = toy_split(&bundle);

        let mut lmix = toy_model(&bundle, 2);
        let mut lcfg = config(TrainMethod::LMix);
        lcfg.freeze_uniform = true;
        lcfg.grl_enabled = false;
        lcfg.omega = 0.0;
        train_debiased(&mut lmix, &bundle, Some(&split), &lcfg, 9).unwrap();

        let mut smix = toy_model(&bundle, 2);
        let mut scfg = config(TrainMethod::SMix);
        scfg.include_werm = false;
        scfg.zeta = 1.0;
        scfg.alpha = 1.0;
        scfg.beta = 1.0;
        train_debiased(&mut smix, &bundle, Some(&split), &scfg, 9).unwrap();

        // feature and classifier must agree bitwise; s-mix leaves the
        // parameter network untouched while frozen l-mix ticks its Adam slots
        // with zero gradients, so compare the trained components only
        assert_eq!(lmix.feature, smix.feature);
        assert_eq!(lmix.classifier, smix.classifier);
    }

    /// The reversal exactly negates the parameter-network update and leaves
    /// the classifier update untouched (single step, omega = 0).
    #[test]
    fn grl_negates_betanet_update_only() {
        let bundle = toy_bundle(2, 0.9);
        let split = toy_split(&bundle);
        let base = toy_model(&bundle, 3);
        let pb = two_stream_sampler(
            &bundle.train,
            bundle.num_classes,
            &split.bias_indices,
            &split.unbias_indices,
            16,
            stream_rng(0, Stream::Batching),
        )
        .unwrap()
        .next()
        .unwrap();

        let mut cfg = config(TrainMethod::LMix);
        cfg.omega = 0.0;

        let run = |grl: bool| -> ModelTriplet {
            let mut m = base.clone();
            let mut c = cfg.clone();
            c.grl_enabled = grl;
            let mut adam = Adam::new(c.lr);
            let mut rng = stream_rng(0, Stream::Mixing);
            l_mix_step(&mut m, &pb, &c, 0.1, &mut adam, &mut rng).unwrap();
            m
        };
        let on = run(true);
        let off = run(false);

        assert_eq!(on.feature, off.feature);
        assert_eq!(on.classifier, off.classifier);
        // first Adam step: negating the gradient negates the update exactly
        let mut any_moved = false;
        for ((pw_on, pw_off), pw0) in on
            .betanet
            .mlp
            .params()
            .into_iter()
            .zip(off.betanet.mlp.params())
            .zip(base.betanet.mlp.params())
        {
            for ((&a, &b), &z) in pw_on.iter().zip(pw_off.iter()).zip(pw0.iter()) {
                let (da, db) = (a - z, b - z);
                assert!((da + db).abs() < 1e-12, "updates not mirrored: {da} vs {db}");
                if da.abs() > 0.0 {
                    any_moved = true;
                }
            }
        }
        assert!(any_moved, "parameter network did not move");
    }

    /// Finite-difference oracle with common random numbers: hold the uniform
    /// u = F(lambda) fixed, re-invert the CDF under perturbed parameters, and
    /// recompute the loss by hand. The tape's parameter-network gradients
    /// (reversal off) must match.
    #[test]
    fn betanet_gradient_matches_quantile_finite_differences() {
        let bundle = toy_bundle(3, 0.9);
        let split = toy_split(&bundle);
        let model = toy_model(&bundle, 4);
        let pb = two_stream_sampler(
            &bundle.train,
            bundle.num_classes,
            &split.bias_indices,
            &split.unbias_indices,
            8,
            stream_rng(1, Stream::Batching),
        )
        .unwrap()
        .next()
        .unwrap();
        let omega = 1e-2;
        let target = 0.1;

        // realized lambdas: draw once against the unperturbed parameters and
        // remember each draw's CDF value
        let f1 = model.feature.forward(&pb.x1).unwrap();
        let f2 = model.feature.forward(&pb.x2).unwrap();
        let bp = model.betanet.forward(&f1, &f2).unwrap();
        let mut rng2 = stream_rng(2, Stream::Mixing);
        let mut u = Vec::new();
        for (&a, &b) in bp.alpha.iter().zip(bp.beta.iter()) {
            let l = sample_beta(a, b, &mut rng2).unwrap();
            u.push(beta_cdf(l, a, b));
        }

        // hand-computed loss as a function of the parameter-network weights,
        // with lambdas re-inverted at fixed u
        let loss_of = |m: &ModelTriplet| -> f64 {
            let f1 = m.feature.forward(&pb.x1).unwrap();
            let f2 = m.feature.forward(&pb.x2).unwrap();
            let bp = m.betanet.forward(&f1, &f2).unwrap();
            let mut lam = Array2::zeros((pb.len(), 1));
            for (i, (&a, &b)) in bp.alpha.iter().zip(bp.beta.iter()).enumerate() {
                lam[[i, 0]] = beta_quantile(u[i], a, b);
            }
            let xm = mix_pair(&pb.x1, &pb.x2, &lam).unwrap();
            let ym = mix_pair(&pb.y1, &pb.y2, &lam).unwrap();
            let logits = m.logits(&xm).unwrap();
            let p = crate::eval::softmax(&logits);
            let mut ce = 0.0;
            for i in 0..pb.len() {
                for c in 0..p.ncols() {
                    ce -= ym[[i, c]] * p[[i, c]].max(1e-300).ln();
                }
            }
            ce /= pb.len() as f64;
            ce + omega * beta_mean_regularizer(&bp.alpha, &bp.beta, target)
        };

        // tape gradients for the parameter network, read off a fresh graph
        let tape_grads: Vec<f64> = {
            let mut g = Graph::new();
            let x1n = g.constant(pb.x1.clone());
            let x2n = g.constant(pb.x2.clone());
            let y1n = g.constant(pb.y1.clone());
            let y2n = g.constant(pb.y2.clone());
            let (f1, _) = model.feature.mlp.forward_graph(&mut g, x1n);
            let (f2, _) = model.feature.mlp.forward_graph(&mut g, x2n);
            let sg1 = g.stop_grad(f1);
            let sg2 = g.stop_grad(f2);
            let cat = g.concat_cols(sg1, sg2);
            let (an, bn, bids) = model.betanet.forward_graph(&mut g, cat);
            let mut rng3 = stream_rng(2, Stream::Mixing);
            let lam = g.beta_sample(an, bn, &mut rng3).unwrap();
            let omn = g.affine(lam, -1.0, 1.0);
            let xa = g.mul_col(x1n, lam);
            let xb = g.mul_col(x2n, omn);
            let xm = g.add(xa, xb);
            let ya = g.mul_col(y1n, lam);
            let yb = g.mul_col(y2n, omn);
            let ym = g.add(ya, yb);
            let (fm, _) = model.feature.mlp.forward_graph(&mut g, xm);
            let (logits, _) = model.classifier.mlp.forward_graph(&mut g, fm);
            let ce = g.cross_entropy(logits, ym, None);
            let sum = g.add(an, bn);
            let mean = g.div_ew(an, sum);
            let tgt = g.constant(Array2::from_elem((pb.len(), 1), target));
            let diff = g.sub(mean, tgt);
            let sq = g.mul_ew(diff, diff);
            let reg = g.mean_all(sq);
            let sreg = g.affine(reg, omega, 0.0);
            let total = g.add(ce, sreg);
            g.backward(total);
            bids.iter()
                .flat_map(|&id| {
                    g.grad(id)
                        .map(|a| a.iter().cloned().collect::<Vec<_>>())
                        .unwrap_or_default()
                })
                .collect()
        };

        // finite differences over the parameter-network weights
        let mut max_rel = 0.0f64;
        let mut k = 0usize;
        let h = 1e-5;
        let n_params = model.betanet.mlp.params().iter().map(|p| p.len()).sum::<usize>();
        assert_eq!(tape_grads.len(), n_params);
        for pi in 0..model.betanet.mlp.params().len() {
            let plen = model.betanet.mlp.params()[pi].len();
            for j in 0..plen {
                let mut mp = model.clone();
                {
                    let mut ps = mp.betanet.mlp.params_mut();
                    let flat = ps[pi].as_slice_mut().unwrap();
                    flat[j] += h;
                }
                let fp = loss_of(&mp);
                let mut mm = model.clone();
                {
                    let mut ps = mm.betanet.mlp.params_mut();
                    let flat = ps[pi].as_slice_mut().unwrap();
                    flat[j] -= h;
                }
                let fm = loss_of(&mm);
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(1e-3);
                max_rel = max_rel.max((tape_grads[k] - fd).abs() / denom);
                k += 1;
            }
        }
        assert!(max_rel < 1e-2, "max rel err {max_rel}");
    }

    #[test]
    fn empty_unbias_split_falls_back_to_vanilla() {
        let bundle = toy_bundle(4, 1.0);
        assert!(bundle.empty_unbias_warning);
        let split = toy_split(&bundle);
        assert!(split.unbias_indices.is_empty());
        let mut model = toy_model(&bundle, 5);
        let cfg = config(TrainMethod::LMix);
        let out = train_debiased(&mut model, &bundle, Some(&split), &cfg, 0).unwrap();
        assert!(out.fallback_vanilla);
        assert!(!out.warnings.is_empty());
        assert_eq!(out.epochs.len(), cfg.epochs);
    }

    #[test]
    fn missing_split_is_an_error_for_mixing_methods() {
        let bundle = toy_bundle(5, 0.9);
        let mut model = toy_model(&bundle, 6);
        let cfg = config(TrainMethod::SMix);
        let err = train_debiased(&mut model, &bundle, None, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn vanilla_strategy_needs_no_split() {
        let bundle = toy_bundle(6, 0.9);
        let mut model = toy_model(&bundle, 7);
        let mut cfg = config(TrainMethod::SMix);
        cfg.strategy = MixStrategy::Vanilla;
        let out = train_debiased(&mut model, &bundle, None, &cfg, 0).unwrap();
        assert_eq!(out.epochs.len(), cfg.epochs);
        assert_eq!(out.gamma_used, Some(0.5));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let bundle = toy_bundle(7, 0.9);
        let split = toy_split(&bundle);
        for method in [TrainMethod::SMix, TrainMethod::LMix] {
            let cfg = config(method);
            let mut m1 = toy_model(&bundle, 8);
            let o1 = train_debiased(&mut m1, &bundle, Some(&split), &cfg, 11).unwrap();
            let mut m2 = toy_model(&bundle, 8);
            let o2 = train_debiased(&mut m2, &bundle, Some(&split), &cfg, 11).unwrap();
            assert_eq!(m1, m2);
            assert_eq!(o1.epochs, o2.epochs);
            let mut m3 = toy_model(&bundle, 8);
            let o3 = train_debiased(&mut m3, &bundle, Some(&split), &cfg, 12).unwrap();
            assert!(m1 != m3 || o1.epochs != o3.epochs);
        }
    }

    #[test]
    fn default_gamma_is_bias_fraction() {
        let bundle = toy_bundle(8, 0.9);
        let split = toy_split(&bundle);
        let mut model = toy_model(&bundle, 9);
        let cfg = config(TrainMethod::SMix);
        let out = train_debiased(&mut model, &bundle, Some(&split), &cfg, 0).unwrap();
        let expect = split.bias_indices.len() as f64 / bundle.train.len() as f64;
        assert_eq!(out.gamma_used, Some(expect));
    }
}
