//! Dataset types, the controlled synthetic-bias generator, persistence, and
//! the two-stream pair sampler.
//!
//! Synthetic samples are built as
//! `x = class_signal * P_class + corruption_strength * U_domain + noise`,
//! where each `P_c` is a class-specific base pattern and each `U_d` a
//! deterministic, visually distinct per-domain corruption (channel tint,
//! fixed noise pattern, or spatial stripes). The corruption is
//! class-independent, so the only bias channel is the class-domain
//! co-occurrence controlled by `rho`.

use std::fs;
use std::io::Read as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;

/// One labeled sample; `bias_domain` is ground truth kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub features: Vec<f32>,
    pub class_label: usize,
    pub bias_domain: Option<usize>,
}

fn default_corruption_strength() -> f64 {
    2.0
}
fn default_class_signal() -> f64 {
    0.35
}
fn default_noise_sigma() -> f64 {
    0.6
}
fn default_image_size() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    #[serde(default)]
    pub num_domains: Option<usize>,
    pub n_per_class: usize,
    pub rho: f64,
    #[serde(default = "default_corruption_strength")]
    pub corruption_strength: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_class_signal")]
    pub class_signal: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub test_per_cell: Option<usize>,
}

impl GeneratorConfig {
    pub fn domains(&self) -> usize {
        self.num_domains.unwrap_or(self.num_classes)
    }

    pub fn feature_dim(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    pub fn resolved_test_per_cell(&self) -> usize {
        self.test_per_cell.unwrap_or((self.n_per_class / 20).max(4))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.n_per_class < 10 {
            return Err(Error::Config("n_per_class must be >= 10".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.domains() < 2 {
            return Err(Error::Config("num_domains must be >= 2".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }
}

/// Train/test partitions with bias metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub rho: f64,
    pub feature_shape: Vec<usize>,
    pub seed: u64,
    pub generator_config: Option<GeneratorConfig>,
    /// Set when rho = 1 left a class with no bias-conflicting samples.
    pub empty_unbias_warning: bool,
}

/// Per-train-sample bias-aligned flags (true = aligned, i.e. biased).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBiasLabels {
    pub aligned: Vec<bool>,
}

impl DatasetBundle {
    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    /// Privileged domain for a class in the synthetic construction.
    pub fn privileged_domain(&self, class: usize) -> usize {
        class % self.num_domains
    }

    /// Ground-truth aligned flags for the train set, if domain labels exist.
    pub fn ground_truth(&self) -> Option<GroundTruthBiasLabels> {
        let mut aligned = Vec::with_capacity(self.train.len());
        for s in &self.train {
            aligned.push(s.bias_domain? == self.privileged_domain(s.class_label));
        }
        Some(GroundTruthBiasLabels { aligned })
    }

    pub fn has_ground_truth(&self) -> bool {
        self.train.iter().all(|s| s.bias_domain.is_some())
    }
}

/// Per-domain corruption: deterministic additive pattern, class-independent.
fn domain_pattern(domain: usize, dim: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pixels = image_size * image_size;
    let mut p = vec![0.0f64; dim];
    match domain % 3 {
        // channel tint
        0 => {
            let tint: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for ch in 0..CHANNELS {
                for px in 0..pixels {
                    p[ch * pixels + px] = tint[ch];
                }
            }
        }
        // fixed additive noise pattern
        1 => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            for v in p.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        // spatial stripes with domain-specific frequency and channel weights
        _ => {
            let freq = 1.0 + (domain / 3) as f64;
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let chw: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for ch in 0..CHANNELS {
                for y in 0..image_size {
                    for x in 0..image_size {
                        let t = x as f64 / image_size as f64;
                        p[ch * pixels + y * image_size + x] =
                            chw[ch] * (std::f64::consts::TAU * freq * t + phase).sin();
                    }
                }
            }
        }
    }
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in p.iter_mut() {
        *v /= norm;
    }
    p
}

fn unit_pattern(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut p: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in p.iter_mut() {
        *v /= norm;
    }
    p
}

/// Generate a controlled synthetic-bias bundle with known ground truth.
pub fn generate_synthetic_biased(config: &GeneratorConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let mut rng = stream_rng(seed, Stream::DataGen);
    let c = config.num_classes;
    let d = config.domains();
    let dim = config.feature_dim();
    let scale = (dim as f64).sqrt();

    // patterns are scaled by sqrt(dim) so per-pixel amplitudes are O(1)
    // relative to unit-variance noise
    let class_patterns: Vec<Vec<f64>> = (0..c).map(|_| unit_pattern(dim, &mut rng)).collect();
    let domain_patterns: Vec<Vec<f64>> = (0..d)
        .map(|dom| domain_pattern(dom, dim, config.image_size, &mut rng))
        .collect();

    let normal = Normal::new(0.0, 1.0).unwrap();
    let make_sample = |index: usize, class: usize, domain: usize, rng: &mut ChaCha8Rng| {
        let mut feat = vec![0.0f32; dim];
        for i in 0..dim {
            let v = config.class_signal * scale * class_patterns[class][i]
                + config.corruption_strength * scale * domain_patterns[domain][i]
                + config.noise_sigma * normal.sample(rng);
            feat[i] = v as f32;
        }
        Sample {
            index,
            features: feat,
            class_label: class,
            bias_domain: Some(domain),
        }
    };

    let n_aligned = (config.rho * config.n_per_class as f64).round() as usize;
    let n_aligned = n_aligned.min(config.n_per_class);
    let mut train = Vec::with_capacity(c * config.n_per_class);
    let mut empty_unbias = false;
    let mut index = 0;
    for class in 0..c {
        let privileged = class % d;
        let others: Vec<usize> = (0..d).filter(|&dom| dom != privileged).collect();
        if n_aligned == config.n_per_class {
            empty_unbias = true;
        }
        for k in 0..config.n_per_class {
            let domain = if k < n_aligned {
                privileged
            } else {
                others[rng.gen_range(0..others.len())]
            };
            train.push(make_sample(index, class, domain, &mut rng));
            index += 1;
        }
    }
    train.shuffle(&mut rng);
    for (i, s) in train.iter_mut().enumerate() {
        s.index = i;
    }

    let per_cell = config.resolved_test_per_cell();
    let mut test = Vec::with_capacity(c * d * per_cell);
    let mut tindex = 0;
    for class in 0..c {
        for domain in 0..d {
            for _ in 0..per_cell {
                test.push(make_sample(tindex, class, domain, &mut rng));
                tindex += 1;
            }
        }
    }

    Ok(DatasetBundle {
        train,
        test,
        num_classes: c,
        num_domains: d,
        rho: config.rho,
        feature_shape: vec![CHANNELS, config.image_size, config.image_size],
        seed,
        generator_config: Some(config.clone()),
        empty_unbias_warning: empty_unbias,
    })
}

// --- persistence: manifest.json + train.bin + test.bin ---

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    count: usize,
    class_labels: Vec<usize>,
    bias_domains: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    schema_version: u32,
    num_classes: usize,
    num_domains: usize,
    rho: f64,
    seed: u64,
    feature_shape: Vec<usize>,
    has_ground_truth: bool,
    empty_unbias_warning: bool,
    generator_config: Option<GeneratorConfig>,
    train: SplitManifest,
    test: SplitManifest,
    checksum_train: String,
    checksum_test: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn features_to_bytes(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * samples.first().map_or(0, |s| s.features.len()) * 4);
    for s in samples {
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn split_manifest(samples: &[Sample], has_gt: bool) -> SplitManifest {
    SplitManifest {
        count: samples.len(),
        class_labels: samples.iter().map(|s| s.class_label).collect(),
        bias_domains: if has_gt {
            Some(samples.iter().map(|s| s.bias_domain.unwrap()).collect())
        } else {
            None
        },
    }
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let train_bytes = features_to_bytes(&bundle.train);
    let test_bytes = features_to_bytes(&bundle.test);
    let has_gt = bundle.has_ground_truth() && bundle.test.iter().all(|s| s.bias_domain.is_some());
    let manifest = BundleManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        num_classes: bundle.num_classes,
        num_domains: bundle.num_domains,
        rho: bundle.rho,
        seed: bundle.seed,
        feature_shape: bundle.feature_shape.clone(),
        has_ground_truth: has_gt,
        empty_unbias_warning: bundle.empty_unbias_warning,
        generator_config: bundle.generator_config.clone(),
        train: split_manifest(&bundle.train, has_gt),
        test: split_manifest(&bundle.test, has_gt),
        checksum_train: sha256_hex(&train_bytes),
        checksum_test: sha256_hex(&test_bytes),
    };
    fs::write(dir.join("train.bin"), &train_bytes)?;
    fs::write(dir.join("test.bin"), &test_bytes)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_split(
    dir: &Path,
    file: &str,
    m: &SplitManifest,
    dim: usize,
    checksum: &str,
) -> Result<Vec<Sample>> {
    let path = dir.join(file);
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .map_err(|e| Error::Persistence {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() != m.count * dim * 4 {
        return Err(Error::Persistence {
            path: path.display().to_string(),
            detail: format!(
                "expected {} bytes for {} samples of dim {}, found {}",
                m.count * dim * 4,
                m.count,
                dim,
                bytes.len()
            ),
        });
    }
    if sha256_hex(&bytes) != checksum {
        return Err(Error::Persistence {
            path: path.display().to_string(),
            detail: "checksum mismatch".into(),
        });
    }
    if m.class_labels.len() != m.count {
        return Err(Error::Persistence {
            path: path.display().to_string(),
            detail: "label count mismatch".into(),
        });
    }
    let mut samples = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let mut feat = vec![0.0f32; dim];
        for (j, f) in feat.iter_mut().enumerate() {
            let off = (i * dim + j) * 4;
            *f = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        }
        samples.push(Sample {
            index: i,
            features: feat,
            class_label: m.class_labels[i],
            bias_domain: m.bias_domains.as_ref().map(|d| d[i]),
        });
    }
    Ok(samples)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let mpath = dir.join("manifest.json");
    let mbytes = fs::read(&mpath).map_err(|e| Error::Persistence {
        path: mpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let manifest: BundleManifest = serde_json::from_slice(&mbytes)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Persistence {
            path: mpath.display().to_string(),
            detail: format!(
                "schema version {} unsupported (expected {})",
                manifest.schema_version, DATASET_SCHEMA_VERSION
            ),
        });
    }
    let dim: usize = manifest.feature_shape.iter().product();
    let train = load_split(dir, "train.bin", &manifest.train, dim, &manifest.checksum_train)?;
    let test = load_split(dir, "test.bin", &manifest.test, dim, &manifest.checksum_test)?;
    Ok(DatasetBundle {
        train,
        test,
        num_classes: manifest.num_classes,
        num_domains: manifest.num_domains,
        rho: manifest.rho,
        feature_shape: manifest.feature_shape,
        seed: manifest.seed,
        generator_config: manifest.generator_config,
        empty_unbias_warning: manifest.empty_unbias_warning,
    })
}

// --- batch assembly and pair sampling ---

/// Features of the given train indices as a batch matrix (f64).
pub fn batch_features(samples: &[Sample], indices: &[usize]) -> Array2<f64> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut x = Array2::zeros((indices.len(), dim));
    for (row, &i) in indices.iter().enumerate() {
        for (col, &v) in samples[i].features.iter().enumerate() {
            x[[row, col]] = v as f64;
        }
    }
    x
}

/// One-hot labels of the given indices.
pub fn batch_labels(samples: &[Sample], indices: &[usize], num_classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((indices.len(), num_classes));
    for (row, &i) in indices.iter().enumerate() {
        y[[row, samples[i].class_label]] = 1.0;
    }
    y
}

/// Aligned two-stream batch; stream 1 comes from the bias split, stream 2
/// from the unbias split.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x1: Array2<f64>,
    pub y1: Array2<f64>,
    pub x2: Array2<f64>,
    pub y2: Array2<f64>,
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.idx1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx1.is_empty()
    }
}

/// One epoch of paired batches over two index pools. The larger pool is
/// shuffled and covered exactly once; the smaller is resampled with
/// replacement.
pub struct PairSampler<'a> {
    samples: &'a [Sample],
    num_classes: usize,
    major: Vec<usize>,
    minor: Vec<usize>,
    /// true when stream 1 (pool_a) is the major stream
    a_is_major: bool,
    batch: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

/// Pair sampler over arbitrary pools; `pool_a` feeds stream 1.
pub fn two_stream_sampler<'a>(
    samples: &'a [Sample],
    num_classes: usize,
    pool_a: &[usize],
    pool_b: &[usize],
    batch: usize,
    mut rng: ChaCha8Rng,
) -> Result<PairSampler<'a>> {
    if pool_a.is_empty() || pool_b.is_empty() {
        return Err(Error::DegenerateSplit(
            "a sampling pool is empty; fall back to vanilla training".into(),
        ));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let a_is_major = pool_a.len() >= pool_b.len();
    let (mut major, minor) = if a_is_major {
        (pool_a.to_vec(), pool_b.to_vec())
    } else {
        (pool_b.to_vec(), pool_a.to_vec())
    };
    major.shuffle(&mut rng);
    Ok(PairSampler {
        samples,
        num_classes,
        major,
        minor,
        a_is_major,
        batch,
        cursor: 0,
        rng,
    })
}

impl<'a> Iterator for PairSampler<'a> {
    type Item = PairBatch;

    fn next(&mut self) -> Option<PairBatch> {
        if self.cursor >= self.major.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.major.len());
        let major_idx: Vec<usize> = self.major[self.cursor..end].to_vec();
        self.cursor = end;
        let minor_idx: Vec<usize> = (0..major_idx.len())
            .map(|_| self.minor[self.rng.gen_range(0..self.minor.len())])
            .collect();
        let (idx1, idx2) = if self.a_is_major {
            (major_idx, minor_idx)
        } else {
            (minor_idx, major_idx)
        };
        Some(PairBatch {
            x1: batch_features(self.samples, &idx1),
            y1: batch_labels(self.samples, &idx1, self.num_classes),
            x2: batch_features(self.samples, &idx2),
            y2: batch_labels(self.samples, &idx2, self.num_classes),
            idx1,
            idx2,
        })
    }
}

/// Row-sum check used by sanity tests; one-hot mixes must keep rows at 1.
pub fn rows_sum_to_one(y: &Array2<f64>, tol: f64) -> bool {
    y.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < tol)
}

/// Per-sample weight vector as Array1 for a batch.
pub fn batch_weights(weights: &[f64], indices: &[usize]) -> Array1<f64> {
    Array1::from_iter(indices.iter().map(|&i| weights[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::split::BiasSplit;
    use std::collections::HashSet;

    fn small_config(c: usize, n: usize, rho: f64) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: c,
            num_domains: None,
            n_per_class: n,
            rho,
            corruption_strength: 1.0,
            image_size: 4,
            class_signal: 0.5,
            noise_sigma: 0.6,
            test_per_cell: Some(4),
        }
    }

    #[test]
    fn aligned_fraction_matches_rho() {
        let b = generate_synthetic_biased(&small_config(2, 100, 0.95), 0).unwrap();
        for class in 0..2 {
            let aligned = b
                .train
                .iter()
                .filter(|s| s.class_label == class && s.bias_domain == Some(class))
                .count();
            assert_eq!(aligned, 95, "class {class}");
        }
        let gt = b.ground_truth().unwrap();
        let frac = gt.aligned.iter().filter(|&&a| a).count() as f64 / gt.aligned.len() as f64;
        assert!((frac - 0.95).abs() < 1e-9);
    }

    #[test]
    fn large_bundle_bias_ratio() {
        let b = generate_synthetic_biased(&small_config(10, 500, 0.95), 1).unwrap();
        let gt = b.ground_truth().unwrap();
        let frac = gt.aligned.iter().filter(|&&a| a).count() as f64 / gt.aligned.len() as f64;
        assert!((frac - 0.95).abs() < 1e-3, "{frac}");
    }

    #[test]
    fn rho_half_is_effectively_unbiased() {
        let b = generate_synthetic_biased(&small_config(2, 100, 0.5), 2).unwrap();
        let gt = b.ground_truth().unwrap();
        let frac = gt.aligned.iter().filter(|&&a| a).count() as f64 / gt.aligned.len() as f64;
        assert!((frac - 0.5).abs() < 1e-9, "{frac}");
    }

    #[test]
    fn rho_one_sets_warning() {
        let b = generate_synthetic_biased(&small_config(2, 10, 1.0), 3).unwrap();
        assert!(b.empty_unbias_warning);
    }

    #[test]
    fn test_set_is_balanced_per_cell() {
        let b = generate_synthetic_biased(&small_config(3, 30, 0.9), 4).unwrap();
        let mut counts = vec![vec![0usize; b.num_domains]; b.num_classes];
        for s in &b.test {
            counts[s.class_label][s.bias_domain.unwrap()] += 1;
        }
        let first = counts[0][0];
        assert!(first > 0);
        for row in &counts {
            for &v in row {
                assert_eq!(v, first);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_biased(&small_config(3, 20, 0.8), 9).unwrap();
        let b = generate_synthetic_biased(&small_config(3, 20, 0.8), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_synthetic_biased(&small_config(1, 100, 0.9), 0).is_err());
        assert!(generate_synthetic_biased(&small_config(2, 5, 0.9), 0).is_err());
        assert!(generate_synthetic_biased(&small_config(2, 100, 0.0), 0).is_err());
        assert!(generate_synthetic_biased(&small_config(2, 100, 1.5), 0).is_err());
    }

    #[test]
    fn roundtrip_is_identity() {
        let b = generate_synthetic_biased(&small_config(2, 100, 0.95), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(b, loaded);
    }

    #[test]
    fn truncated_file_fails_to_load() {
        let b = generate_synthetic_biased(&small_config(2, 20, 0.9), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let tb = fs::read(dir.path().join("train.bin")).unwrap();
        fs::write(dir.path().join("train.bin"), &tb[..tb.len() - 8]).unwrap();
        assert!(load_bundle(dir.path()).is_err());
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let b = generate_synthetic_biased(&small_config(2, 20, 0.9), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let mut tb = fs::read(dir.path().join("train.bin")).unwrap();
        tb[0] ^= 0xff;
        fs::write(dir.path().join("train.bin"), &tb).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn bundle_without_ground_truth_loads_as_absent() {
        let mut b = generate_synthetic_biased(&small_config(2, 20, 0.9), 7).unwrap();
        for s in b.train.iter_mut().chain(b.test.iter_mut()) {
            s.bias_domain = None;
        }
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert!(!loaded.has_ground_truth());
        assert!(loaded.ground_truth().is_none());
    }

    #[test]
    fn pair_sampler_covers_major_once_and_respects_pools() {
        let b = generate_synthetic_biased(&small_config(2, 500, 0.95), 8).unwrap();
        let gt = b.ground_truth().unwrap();
        let split = BiasSplit::from_ground_truth(&gt);
        let rng = stream_rng(0, Stream::Batching);
        let sampler = two_stream_sampler(
            &b.train,
            b.num_classes,
            &split.bias_indices,
            &split.unbias_indices,
            50,
            rng,
        )
        .unwrap();
        let bias_set: HashSet<usize> = split.bias_indices.iter().cloned().collect();
        let unbias_set: HashSet<usize> = split.unbias_indices.iter().cloned().collect();
        let mut seen_major = Vec::new();
        let mut n_batches = 0;
        for batch in sampler {
            n_batches += 1;
            assert_eq!(batch.idx1.len(), batch.idx2.len());
            for &i in &batch.idx1 {
                assert!(bias_set.contains(&i));
            }
            for &i in &batch.idx2 {
                assert!(unbias_set.contains(&i));
            }
            seen_major.extend_from_slice(&batch.idx1);
        }
        // |bias| = 950, batch 50 -> 19 batches covering the bias pool once
        assert_eq!(n_batches, 19);
        let uniq: HashSet<usize> = seen_major.iter().cloned().collect();
        assert_eq!(uniq.len(), split.bias_indices.len());
    }

    #[test]
    fn pair_sampler_is_deterministic_under_seed() {
        let b = generate_synthetic_biased(&small_config(2, 100, 0.9), 10).unwrap();
        let gt = b.ground_truth().unwrap();
        let split = BiasSplit::from_ground_truth(&gt);
        let run = |seed: u64| -> Vec<(Vec<usize>, Vec<usize>)> {
            two_stream_sampler(
                &b.train,
                b.num_classes,
                &split.bias_indices,
                &split.unbias_indices,
                16,
                stream_rng(seed, Stream::Batching),
            )
            .unwrap()
            .map(|p| (p.idx1, p.idx2))
            .collect()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn empty_pool_is_an_error() {
        let b = generate_synthetic_biased(&small_config(2, 20, 0.9), 11).unwrap();
        let err = match two_stream_sampler(
            &b.train,
            b.num_classes,
            &[0, 1, 2],
            &[],
            4,
            stream_rng(0, Stream::Batching),
        ) {
            Err(e) => e,
            Ok(_) => panic!("empty pool accepted"),
        };
        assert!(matches!(err, Error::DegenerateSplit(_)));
    }
}
