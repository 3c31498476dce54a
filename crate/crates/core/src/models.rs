//! Desk-scale differentiable components: feature extractor, classifier head,
//! and the Beta-parameter network, plus checkpoint persistence.

use std::fs;
use std::io::Read as _;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Positivity floor added to softplus for the Beta parameters.
pub const BETA_PARAM_EPS: f64 = 1e-4;

fn default_feature_hidden() -> Vec<usize> {
    vec![64]
}
fn default_feature_dim() -> usize {
    64
}
fn default_classifier_hidden() -> Vec<usize> {
    vec![]
}
fn default_betanet_hidden() -> Vec<usize> {
    vec![64, 64]
}

/// Network shapes; enough to rebuild a checkpointed triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_feature_hidden")]
    pub feature_hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_classifier_hidden")]
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "default_betanet_hidden")]
    pub betanet_hidden: Vec<usize>,
}

impl ArchConfig {
    pub fn desk_scale(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            feature_hidden: default_feature_hidden(),
            feature_dim: default_feature_dim(),
            classifier_hidden: default_classifier_hidden(),
            betanet_hidden: default_betanet_hidden(),
        }
    }
}

/// Fully connected stack with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
    /// apply ReLU after the last layer too (feature extractors do)
    pub relu_output: bool,
}

impl Mlp {
    pub fn new(dims: &[usize], relu_output: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                normal.sample(rng)
            }));
            biases.push(Array2::zeros((1, fan_out)));
        }
        Self {
            weights,
            biases,
            relu_output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    /// Plain inference forward.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "expected input dim {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            h = h.dot(w) + b;
            if i < last || self.relu_output {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Graph forward; registers parameters as grad leaves and returns their
    /// node ids in `params()` order (all weights, then all biases).
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let mut wids = Vec::new();
        let mut bids = Vec::new();
        let mut h = x;
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let wn = g.param(w.clone());
            let bn = g.param(b.clone());
            wids.push(wn);
            bids.push(bn);
            let mm = g.matmul(h, wn);
            h = g.add_row(mm, bn);
            if i < last || self.relu_output {
                h = g.relu(h);
            }
        }
        wids.extend(bids);
        (h, wids)
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .collect()
    }
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Backbone `f`: input -> feature vector, ReLU features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub mlp: Mlp,
}

impl FeatureExtractor {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.feature_hidden);
        dims.push(arch.feature_dim);
        Self {
            mlp: Mlp::new(&dims, true, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_finite(x, "feature extractor input")?;
        self.mlp.forward(x)
    }
}

/// Head `g`: features -> class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub mlp: Mlp,
}

impl Classifier {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![arch.feature_dim];
        dims.extend_from_slice(&arch.classifier_hidden);
        dims.push(arch.num_classes);
        Self {
            mlp: Mlp::new(&dims, false, rng),
        }
    }

    pub fn forward(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        check_finite(features, "classifier input")?;
        self.mlp.forward(features)
    }
}

/// Per-pair Beta parameters, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaParams {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
}

/// Parameter network `h`: concatenated feature pair -> (alpha, beta).
#[derive(Debug, Clone, PartialEq)]
pub struct BetaNet {
    pub mlp: Mlp,
}

impl BetaNet {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![2 * arch.feature_dim];
        dims.extend_from_slice(&arch.betanet_hidden);
        dims.push(2);
        Self {
            mlp: Mlp::new(&dims, false, rng),
        }
    }

    /// Inference path: positivity via softplus(raw) + eps.
    pub fn forward(&self, feat1: &Array2<f64>, feat2: &Array2<f64>) -> Result<BetaParams> {
        check_finite(feat1, "beta net input (stream 1)")?;
        check_finite(feat2, "beta net input (stream 2)")?;
        if feat1.dim() != feat2.dim() {
            return Err(Error::Shape(format!(
                "feature pair mismatch: {:?} vs {:?}",
                feat1.dim(),
                feat2.dim()
            )));
        }
        let cat = ndarray::concatenate(ndarray::Axis(1), &[feat1.view(), feat2.view()])
            .expect("concat");
        let raw = self.mlp.forward(&cat)?;
        let pos = raw.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p() + BETA_PARAM_EPS);
        Ok(BetaParams {
            alpha: pos.column(0).to_owned().insert_axis(ndarray::Axis(1)),
            beta: pos.column(1).to_owned().insert_axis(ndarray::Axis(1)),
        })
    }

    /// Graph path; input node must already be the concatenated (possibly
    /// stop-gradded) feature pair. Returns (alpha, beta, param ids).
    pub fn forward_graph(&self, g: &mut Graph, cat: NodeId) -> (NodeId, NodeId, Vec<NodeId>) {
        let (raw, ids) = self.mlp.forward_graph(g, cat);
        let sp = g.softplus(raw);
        let pos = g.affine(sp, 1.0, BETA_PARAM_EPS);
        let alpha = g.slice_cols(pos, 0, 1);
        let beta = g.slice_cols(pos, 1, 2);
        (alpha, beta, ids)
    }
}

/// The three differentiable components trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTriplet {
    pub arch: ArchConfig,
    pub feature: FeatureExtractor,
    pub classifier: Classifier,
    pub betanet: BetaNet,
}

impl ModelTriplet {
    pub fn new(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::ModelInit);
        let feature = FeatureExtractor::new(&arch, &mut rng);
        let classifier = Classifier::new(&arch, &mut rng);
        let betanet = BetaNet::new(&arch, &mut rng);
        Self {
            arch,
            feature,
            classifier,
            betanet,
        }
    }

    /// Logits for a batch (inference).
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let f = self.feature.forward(x)?;
        self.classifier.forward(&f)
    }

    /// Argmax class predictions.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let lg = self.logits(x)?;
        Ok(lg
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [
            ("feature", &self.feature.mlp),
            ("classifier", &self.classifier.mlp),
            ("betanet", &self.betanet.mlp),
        ] {
            for (i, w) in mlp.weights.iter().enumerate() {
                out.push((format!("{prefix}.w{i}"), w));
            }
            for (i, b) in mlp.biases.iter().enumerate() {
                out.push((format!("{prefix}.b{i}"), b));
            }
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [
            ("feature", &mut self.feature.mlp),
            ("classifier", &mut self.classifier.mlp),
            ("betanet", &mut self.betanet.mlp),
        ] {
            for (i, w) in mlp.weights.iter_mut().enumerate() {
                out.push((format!("{prefix}.w{i}"), w));
            }
            for (i, b) in mlp.biases.iter_mut().enumerate() {
                out.push((format!("{prefix}.b{i}"), b));
            }
        }
        out
    }

    /// Checkpoint: params.bin (f64 LE) + checkpoint.json sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        for (name, arr) in self.named_params() {
            entries.push(CheckpointEntry {
                name,
                shape: vec![arr.nrows(), arr.ncols()],
                offset: blob.len(),
            });
            for v in arr.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(&blob);
        let checksum: String = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let sidecar = CheckpointSidecar {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            arch: self.arch.clone(),
            entries,
            checksum,
        };
        fs::write(dir.join("params.bin"), &blob)?;
        fs::write(
            dir.join("checkpoint.json"),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spath = dir.join("checkpoint.json");
        let sidecar: CheckpointSidecar =
            serde_json::from_slice(&fs::read(&spath).map_err(|e| Error::Persistence {
                path: spath.display().to_string(),
                detail: e.to_string(),
            })?)?;
        if sidecar.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Persistence {
                path: spath.display().to_string(),
                detail: format!("unsupported checkpoint schema {}", sidecar.schema_version),
            });
        }
        let bpath = dir.join("params.bin");
        let mut blob = Vec::new();
        fs::File::open(&bpath)
            .map_err(|e| Error::Persistence {
                path: bpath.display().to_string(),
                detail: e.to_string(),
            })?
            .read_to_end(&mut blob)?;
        let mut hasher = Sha256::new();
        hasher.update(&blob);
        let checksum: String = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        if checksum != sidecar.checksum {
            return Err(Error::Persistence {
                path: bpath.display().to_string(),
                detail: "checksum mismatch".into(),
            });
        }
        let mut triplet = ModelTriplet::new(sidecar.arch.clone(), 0);
        for entry in &sidecar.entries {
            let len = entry.shape[0] * entry.shape[1];
            if entry.offset + len * 8 > blob.len() {
                return Err(Error::Persistence {
                    path: bpath.display().to_string(),
                    detail: format!("entry {} exceeds blob", entry.name),
                });
            }
            let vals: Vec<f64> = (0..len)
                .map(|i| {
                    let off = entry.offset + i * 8;
                    f64::from_le_bytes(blob[off..off + 8].try_into().unwrap())
                })
                .collect();
            let arr = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), vals)
                .map_err(|e| Error::Shape(e.to_string()))?;
            let mut found = false;
            for (name, slot) in triplet.named_params_mut() {
                if name == entry.name {
                    if slot.dim() != arr.dim() {
                        return Err(Error::Persistence {
                            path: bpath.display().to_string(),
                            detail: format!("shape mismatch for {name}"),
                        });
                    }
                    *slot = arr.clone();
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Persistence {
                    path: bpath.display().to_string(),
                    detail: format!("unknown parameter {}", entry.name),
                });
            }
        }
        Ok(triplet)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSidecar {
    schema_version: u32,
    arch: ArchConfig,
    entries: Vec<CheckpointEntry>,
    checksum: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use ndarray::{array, Array2};
    use rand::Rng as _;

    fn arch() -> ArchConfig {
        ArchConfig {
            input_dim: 6,
            num_classes: 3,
            feature_hidden: vec![8],
            feature_dim: 5,
            classifier_hidden: vec![],
            betanet_hidden: vec![4],
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let t = ModelTriplet::new(arch(), 42);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) * 0.1);
        let f1 = t.feature.forward(&x).unwrap();
        let f2 = t.feature.forward(&x).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.dim(), (4, 5));
        let lg = t.classifier.forward(&f1).unwrap();
        assert_eq!(lg.dim(), (4, 3));
    }

    #[test]
    fn zero_input_gives_finite_features() {
        let t = ModelTriplet::new(arch(), 1);
        let x = Array2::zeros((2, 6));
        let f = t.feature.forward(&x).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let t = ModelTriplet::new(arch(), 1);
        let x = Array2::zeros((2, 7));
        assert!(t.feature.forward(&x).is_err());
    }

    #[test]
    fn beta_params_positive_softplus_floor() {
        // raw output 0 -> softplus(0) + eps
        let expected = (2.0f64).ln() + BETA_PARAM_EPS;
        assert!((expected - 0.6932).abs() < 1e-3);
        // raw output -40 saturates to the floor
        let floor = 0.0f64.max(-40.0) + (-40.0f64.abs()).exp().ln_1p() + BETA_PARAM_EPS;
        assert!((floor - BETA_PARAM_EPS).abs() < 1e-12);
    }

    #[test]
    fn beta_net_outputs_batch_of_positive_pairs() {
        let t = ModelTriplet::new(arch(), 7);
        let f1 = Array2::from_shape_fn((9, 5), |(i, j)| (i * j) as f64 * 0.3 - 1.0);
        let f2 = Array2::from_shape_fn((9, 5), |(i, j)| (j as f64 - i as f64) * 0.2);
        let p = t.betanet.forward(&f1, &f2).unwrap();
        assert_eq!(p.alpha.dim(), (9, 1));
        assert_eq!(p.beta.dim(), (9, 1));
        assert!(p.alpha.iter().chain(p.beta.iter()).all(|&v| v > 0.0));
    }

    #[test]
    fn beta_net_rejects_non_finite() {
        let t = ModelTriplet::new(arch(), 7);
        let f1 = Array2::from_elem((2, 5), f64::NAN);
        let f2 = Array2::zeros((2, 5));
        assert!(t.betanet.forward(&f1, &f2).is_err());
    }

    #[test]
    fn graph_forward_matches_inference_forward() {
        let t = ModelTriplet::new(arch(), 3);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| (i + j) as f64 * 0.1 - 0.3);
        let plain = t.feature.forward(&x).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let (out, _) = t.feature.mlp.forward_graph(&mut g, xn);
        assert_eq!(g.value(out), &plain);
    }

    /// Smallest |pre-ReLU activation| across the feature stack; finite
    /// differences are only trustworthy when no unit straddles the kink
    /// within the FD window.
    fn min_abs_preactivation(t: &ModelTriplet, x: &Array2<f64>) -> f64 {
        let mlp = &t.feature.mlp;
        let mut h = x.clone();
        let mut min_abs = f64::INFINITY;
        let last = mlp.weights.len() - 1;
        for (i, (w, b)) in mlp.weights.iter().zip(mlp.biases.iter()).enumerate() {
            h = h.dot(w) + b;
            if i < last || mlp.relu_output {
                for &v in h.iter() {
                    min_abs = min_abs.min(v.abs());
                }
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        min_abs
    }

    /// Central-difference gradient check over all triplet parameters on a
    /// small random instance (float64).
    #[test]
    fn component_gradients_match_finite_differences() {
        let mut rng = stream_rng(11, Stream::MonteCarlo);
        let mut checked = 0usize;
        for trial in 0..8 {
            let a = ArchConfig {
                input_dim: 4,
                num_classes: 3,
                feature_hidden: vec![5],
                feature_dim: 4,
                classifier_hidden: vec![],
                betanet_hidden: vec![4],
            };
            let t = ModelTriplet::new(a, 100 + trial);
            let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
            let targets = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            if min_abs_preactivation(&t, &x) < 1e-3 {
                continue; // FD would straddle a ReLU kink; not a gradient bug
            }
            checked += 1;

            let build = |t: &ModelTriplet| {
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let (feat, fids) = t.feature.mlp.forward_graph(&mut g, xn);
                let (logits, cids) = t.classifier.mlp.forward_graph(&mut g, feat);
                let tn = g.constant(targets.clone());
                let loss = g.cross_entropy(logits, tn, None);
                (g, loss, fids, cids)
            };

            let (mut g, loss, fids, cids) = build(&t);
            g.backward(loss);
            let auto: Vec<f64> = fids
                .iter()
                .chain(cids.iter())
                .flat_map(|&id| g.grad(id).unwrap().iter().cloned().collect::<Vec<_>>())
                .collect();

            // flatten params, perturb, rebuild
            let flat0: Vec<f64> = t
                .feature
                .mlp
                .params()
                .into_iter()
                .chain(t.classifier.mlp.params())
                .flat_map(|p| p.iter().cloned().collect::<Vec<_>>())
                .collect();
            let mut flat = flat0.clone();
            let f = |vals: &[f64]| {
                let mut t2 = t.clone();
                let mut k = 0;
                for p in t2
                    .feature
                    .mlp
                    .params_mut()
                    .into_iter()
                    .chain(t2.classifier.mlp.params_mut())
                {
                    for v in p.iter_mut() {
                        *v = vals[k];
                        k += 1;
                    }
                }
                let (g2, loss2, _, _) = build(&t2);
                g2.scalar(loss2)
            };
            let fd = finite_diff_grad(&mut flat, f, 1e-4);
            let mut max_rel = 0.0f64;
            let mut worst = 0usize;
            for (i, (a, b)) in auto.iter().zip(fd.iter()).enumerate() {
                let denom = b.abs().max(1e-4);
                let rel = (a - b).abs() / denom;
                if rel > max_rel {
                    max_rel = rel;
                    worst = i;
                }
            }
            assert!(
                max_rel < 1e-3,
                "trial {trial}: max rel err {max_rel} at flat index {worst}: auto {} fd {} (of {})",
                auto[worst],
                fd[worst],
                auto.len()
            );
        }
        assert!(checked >= 2, "only {checked} kink-free instances found");
    }

    #[test]
    fn checkpoint_roundtrip_exact() {
        let t = ModelTriplet::new(arch(), 19);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let loaded = ModelTriplet::load(dir.path()).unwrap();
        assert_eq!(t, loaded);
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let t = ModelTriplet::new(arch(), 19);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let mut blob = fs::read(dir.path().join("params.bin")).unwrap();
        blob[3] ^= 0x55;
        fs::write(dir.path().join("params.bin"), &blob).unwrap();
        assert!(ModelTriplet::load(dir.path()).is_err());
    }
}
