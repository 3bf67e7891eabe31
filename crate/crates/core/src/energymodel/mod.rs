//! Gradient-boosted tree model predicting normalized kernel energy.
//!
//! Targets are energies divided by a per-task reference (the lowest energy
//! measured so far), so the best kernels sit near 1. Trees are fitted to the
//! first and second derivatives of [`weighted_sq_loss`].

mod loss;
mod tree;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, FEATURE_DIM, FEATURE_SCHEMA};
use crate::fsutil::write_atomic;
use crate::stats::spearman;

pub use loss::{snr_db, weighted_sq_loss, LossTerms, SNR_CAP_DB};
pub use tree::Node;
use tree::{Presorted, TreeParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Lower bound on every prediction.
pub const PREDICTION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("energy must be positive, got {0}")]
    NonPositiveEnergy(f64),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("model format mismatch: {0}")]
    VersionMismatch(String),
    #[error("predicted has {predicted} values but measured has {measured}")]
    LengthMismatch { predicted: usize, measured: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid boosting parameters: {0}")]
    InvalidParams(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for ModelError {
    fn from(e: io::Error) -> Self {
        ModelError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub features: FeatureVector,
    pub measured_energy_mj: f64,
    pub normalized_energy: f64,
}

impl EnergySample {
    pub fn new(features: FeatureVector, measured_energy_mj: f64, reference_energy_mj: f64) -> Result<Self, ModelError> {
        if !(measured_energy_mj > 0.0) {
            return Err(ModelError::NonPositiveEnergy(measured_energy_mj));
        }
        if !(reference_energy_mj > 0.0) {
            return Err(ModelError::NonPositiveEnergy(reference_energy_mj));
        }
        Ok(EnergySample {
            features,
            measured_energy_mj,
            normalized_energy: measured_energy_mj / reference_energy_mj,
        })
    }

    /// Reference energy implied by this sample.
    pub fn reference_energy_mj(&self) -> f64 {
        self.measured_energy_mj / self.normalized_energy
    }
}

/// Builds samples normalized by the lowest energy among them.
pub fn normalize(raw: Vec<(FeatureVector, f64)>) -> Result<Vec<EnergySample>, ModelError> {
    if raw.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if let Some(&(_, bad)) = raw.iter().find(|(_, e)| !(*e > 0.0)) {
        return Err(ModelError::NonPositiveEnergy(bad));
    }
    let reference = raw.iter().map(|(_, e)| *e).fold(f64::INFINITY, f64::min);
    raw.into_iter()
        .map(|(f, e)| EnergySample::new(f, e, reference))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    pub lambda: f64,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_trees: 100,
            max_depth: 6,
            learning_rate: 0.1,
            min_child_weight: 1e-3,
            lambda: 1.0,
            subsample: 1.0,
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidParams(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.min_child_weight >= 0.0) {
            return bad("lambda and min_child_weight must be non-negative");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub format_version: u32,
    pub schema: String,
    pub feature_dim: usize,
    pub params: BoostParams,
    pub base_score: f64,
    /// Energy (mJ) that a normalized score of 1 stands for.
    pub reference_energy_mj: f64,
    pub trees: Vec<Node>,
}

fn check_schema(f: &FeatureVector, dim: usize) -> Result<(), ModelError> {
    if f.schema != FEATURE_SCHEMA {
        return Err(ModelError::SchemaMismatch(format!(
            "features use schema {:?}, expected {FEATURE_SCHEMA:?}",
            f.schema
        )));
    }
    if f.dim() != dim {
        return Err(ModelError::SchemaMismatch(format!(
            "feature vector has {} values, expected {dim}",
            f.dim()
        )));
    }
    Ok(())
}

pub fn train(samples: &[EnergySample], params: &BoostParams, rng_seed: u64) -> Result<EnergyModel, ModelError> {
    train_traced(samples, params, rng_seed).map(|(m, _)| m)
}

/// Like [`train`], also returning the mean training loss after each round
/// (entry 0 is the loss of the base score alone).
pub fn train_traced(
    samples: &[EnergySample],
    params: &BoostParams,
    rng_seed: u64,
) -> Result<(EnergyModel, Vec<f64>), ModelError> {
    params.validate()?;
    if samples.len() < 2 {
        return Err(ModelError::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    for s in samples {
        check_schema(&s.features, FEATURE_DIM)?;
        if !(s.measured_energy_mj > 0.0) {
            return Err(ModelError::NonPositiveEnergy(s.measured_energy_mj));
        }
        if !(s.normalized_energy > 0.0) {
            return Err(ModelError::NonPositiveEnergy(s.normalized_energy));
        }
    }

    let n = samples.len();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.values.clone()).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.normalized_energy).collect();
    // Loss-minimizing constant: the harmonic mean of the targets.
    let base_score = n as f64 / y.iter().map(|v| 1.0 / v).sum::<f64>();

    let presorted = Presorted::new(&rows, FEATURE_DIM);
    let tp = TreeParams {
        max_depth: params.max_depth,
        min_child_weight: params.min_child_weight,
        lambda: params.lambda,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let take = ((params.subsample * n as f64).round() as usize).clamp(1, n);

    let mut raw = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mean_loss = |raw: &[f64]| -> f64 {
        raw.iter()
            .zip(&y)
            .map(|(&p, &m)| weighted_sq_loss(p, m).map(|t| t.value).unwrap_or(f64::NAN))
            .sum::<f64>()
            / n as f64
    };
    let mut history = vec![mean_loss(&raw)];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for i in 0..n {
            let t = weighted_sq_loss(raw[i], y[i])?;
            g[i] = t.gradient;
            h[i] = t.hessian;
        }
        let active = if take == n {
            vec![true; n]
        } else {
            let mut a = vec![false; n];
            for i in sample(&mut rng, n, take) {
                a[i] = true;
            }
            a
        };
        let tree = presorted.fit(&g, &h, &active, &tp);
        for (r, x) in raw.iter_mut().zip(&rows) {
            *r += params.learning_rate * tree.eval(x);
        }
        trees.push(tree);
        history.push(mean_loss(&raw));
    }

    let model = EnergyModel {
        format_version: MODEL_FORMAT_VERSION,
        schema: FEATURE_SCHEMA.to_string(),
        feature_dim: FEATURE_DIM,
        params: params.clone(),
        base_score,
        reference_energy_mj: samples[0].reference_energy_mj(),
        trees,
    };
    Ok((model, history))
}

impl EnergyModel {
    /// Normalized energy score of a kernel.
    pub fn predict(&self, f: &FeatureVector) -> Result<f64, ModelError> {
        if f.schema != self.schema {
            return Err(ModelError::SchemaMismatch(format!(
                "features use schema {:?}, model expects {:?}",
                f.schema, self.schema
            )));
        }
        if f.dim() != self.feature_dim {
            return Err(ModelError::SchemaMismatch(format!(
                "feature vector has {} values, model expects {}",
                f.dim(),
                self.feature_dim
            )));
        }
        Ok(self.predict_values(&f.values))
    }

    fn predict_values(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.eval(x)).sum();
        (self.base_score + self.params.learning_rate * sum).max(PREDICTION_FLOOR)
    }

    /// Prediction scaled back to millijoules.
    pub fn predict_energy_mj(&self, f: &FeatureVector) -> Result<f64, ModelError> {
        Ok(self.predict(f)? * self.reference_energy_mj)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            schema: String,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| ModelError::Io(format!("malformed model: {e}")))?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::VersionMismatch(format!(
                "model format {} (expected {MODEL_FORMAT_VERSION})",
                header.format_version
            )));
        }
        if header.schema != FEATURE_SCHEMA {
            return Err(ModelError::VersionMismatch(format!(
                "feature schema {:?} (expected {FEATURE_SCHEMA:?})",
                header.schema
            )));
        }
        let model: EnergyModel =
            serde_json::from_str(text).map_err(|e| ModelError::Io(format!("malformed model: {e}")))?;
        if model.feature_dim != FEATURE_DIM || model.trees.iter().any(|t| !t.fits_dim(model.feature_dim)) {
            return Err(ModelError::SchemaMismatch(format!(
                "model has feature_dim {} (expected {FEATURE_DIM})",
                model.feature_dim
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn save_samples(path: &Path, samples: &[EnergySample]) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| ModelError::Io(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<EnergySample>, ModelError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: EnergySample =
            serde_json::from_str(&line).map_err(|e| ModelError::Io(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub decile: usize,
    pub count: usize,
    pub mean_measured: f64,
    pub mean_predicted: f64,
    pub mean_abs_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub snr_db: f64,
    /// `None` when either side is constant.
    pub spearman: Option<f64>,
    /// Error breakdown by decile of measured normalized energy.
    pub deciles: Vec<DecileRow>,
}

/// Compares predictions with the normalized energies of `samples`.
pub fn evaluate(model: &EnergyModel, samples: &[EnergySample]) -> Result<Evaluation, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let measured: Vec<f64> = samples.iter().map(|s| s.normalized_energy).collect();
    let predicted = samples
        .iter()
        .map(|s| model.predict(&s.features))
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| measured[a].total_cmp(&measured[b]));
    let n = samples.len();
    let buckets = n.min(10);
    let deciles = (0..buckets)
        .map(|d| {
            let idx = &order[d * n / buckets..(d + 1) * n / buckets];
            let c = idx.len() as f64;
            DecileRow {
                decile: d + 1,
                count: idx.len(),
                mean_measured: idx.iter().map(|&i| measured[i]).sum::<f64>() / c,
                mean_predicted: idx.iter().map(|&i| predicted[i]).sum::<f64>() / c,
                mean_abs_rel_error: idx
                    .iter()
                    .map(|&i| (predicted[i] - measured[i]).abs() / measured[i])
                    .sum::<f64>()
                    / c,
            }
        })
        .collect();
    Ok(Evaluation {
        samples: n,
        snr_db: snr_db(&predicted, &measured)?,
        spearman: spearman(&predicted, &measured),
        deciles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fv(values: Vec<f64>) -> FeatureVector {
        let mut v = values;
        v.resize(FEATURE_DIM, 0.0);
        FeatureVector::new(v)
    }

    fn samples_from(points: &[(Vec<f64>, f64)]) -> Vec<EnergySample> {
        points
            .iter()
            .map(|(x, e)| EnergySample::new(fv(x.clone()), *e, 1.0).unwrap())
            .collect()
    }

    #[test]
    fn constant_target() {
        let s = samples_from(&[(vec![1.0, 2.0], 3.5), (vec![1.0, 2.0], 3.5)]);
        let m = train(&s, &BoostParams::default(), 0).unwrap();
        assert!((m.predict(&s[0].features).unwrap() - 3.5).abs() < 1e-6);
    }

    #[test]
    fn too_few_samples() {
        let s = samples_from(&[(vec![1.0], 1.0)]);
        assert_eq!(
            train(&s, &BoostParams::default(), 0),
            Err(ModelError::InsufficientData { needed: 2, got: 1 })
        );
    }

    #[test]
    fn schema_is_checked() {
        let mut s = samples_from(&[(vec![1.0], 1.0), (vec![2.0], 2.0)]);
        s[1].features.schema = "other".into();
        assert!(matches!(train(&s, &BoostParams::default(), 0), Err(ModelError::SchemaMismatch(_))));
        s[1].features = FeatureVector::new(vec![1.0; 3]);
        assert!(matches!(train(&s, &BoostParams::default(), 0), Err(ModelError::SchemaMismatch(_))));

        let m = train(&samples_from(&[(vec![1.0], 1.0), (vec![2.0], 2.0)]), &BoostParams::default(), 0).unwrap();
        assert!(matches!(m.predict(&FeatureVector::new(vec![0.0; 2])), Err(ModelError::SchemaMismatch(_))));
    }

    fn step_fixture(seed: u64, n: usize) -> Vec<EnergySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x0: f64 = rng.random_range(0.0..10.0);
                let noise: f64 = rng.random_range(0.0..10.0);
                let e = 1.0 + x0.floor();
                EnergySample::new(fv(vec![x0, noise]), e, 1.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn step_function_ranks_perfectly() {
        let train_set = step_fixture(1, 400);
        let held_out = step_fixture(2, 200);
        let m = train(&train_set, &BoostParams::default(), 0).unwrap();
        let ev = evaluate(&m, &held_out).unwrap();
        assert_eq!(ev.spearman, Some(1.0));
        assert_eq!(ev.deciles.len(), 10);
    }

    #[test]
    fn low_energy_cluster_fits_tighter() {
        // Feature 0 separates clusters only coarsely; feature 1 is noise.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for i in 0..200 {
            let low = i % 2 == 0;
            let e = if low { rng.random_range(1.0..2.0) } else { rng.random_range(10.0..20.0) };
            pts.push((vec![rng.random_range(0.0..1.0), if low { 0.0 } else { 1.0 }], e));
        }
        let params = BoostParams {
            n_trees: 30,
            max_depth: 2,
            ..BoostParams::default()
        };
        let s = samples_from(&pts);
        let m = train(&s, &params, 0).unwrap();
        let (mut low_err, mut high_err) = (0.0, 0.0);
        for (x, (_, e)) in s.iter().zip(&pts) {
            let err = (m.predict(&x.features).unwrap() - e).abs();
            if *e < 5.0 {
                low_err += err;
            } else {
                high_err += err;
            }
        }
        assert!(low_err <= high_err, "{low_err} vs {high_err}");
    }

    #[test]
    fn training_loss_never_increases() {
        for seed in 0..5 {
            let s = step_fixture(seed, 150);
            for subsample in [1.0, 0.7] {
                let params = BoostParams {
                    subsample,
                    ..BoostParams::default()
                };
                let (_, hist) = train_traced(&s, &params, seed).unwrap();
                assert_eq!(hist.len(), params.n_trees + 1);
                for w in hist.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = step_fixture(3, 100);
        let p = BoostParams {
            subsample: 0.5,
            ..BoostParams::default()
        };
        assert_eq!(train(&s, &p, 9).unwrap(), train(&s, &p, 9).unwrap());
    }

    #[test]
    fn normalize_uses_minimum() {
        let s = normalize(vec![(fv(vec![]), 4.0), (fv(vec![]), 2.0)]).unwrap();
        assert_eq!(s[0].normalized_energy, 2.0);
        assert_eq!(s[1].normalized_energy, 1.0);
        assert_eq!(s[0].reference_energy_mj(), 2.0);
        assert!(matches!(normalize(vec![(fv(vec![]), 0.0)]), Err(ModelError::NonPositiveEnergy(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let s = step_fixture(4, 120);
        let m = train(&s, &BoostParams::default(), 0).unwrap();
        m.save(&path).unwrap();
        let back = EnergyModel::load(&path).unwrap();
        for x in step_fixture(5, 50) {
            assert_eq!(
                m.predict(&x.features).unwrap().to_bits(),
                back.predict(&x.features).unwrap().to_bits()
            );
        }

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(EnergyModel::load(&path), Err(ModelError::Io(_))));

        let other = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        fs::write(&path, other).unwrap();
        assert!(matches!(EnergyModel::load(&path), Err(ModelError::VersionMismatch(_))));

        let other = text.replacen(FEATURE_SCHEMA, "etune-features-v0", 1);
        fs::write(&path, other).unwrap();
        assert!(matches!(EnergyModel::load(&path), Err(ModelError::VersionMismatch(_))));

        assert!(matches!(EnergyModel::load(&dir.path().join("missing.json")), Err(ModelError::Io(_))));
    }

    #[test]
    fn sample_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let s = step_fixture(6, 20);
        save_samples(&path, &s).unwrap();
        assert_eq!(load_samples(&path).unwrap(), s);
    }
}
